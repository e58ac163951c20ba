import sys
from pathlib import Path

# modules live flat at the repository root
sys.path.insert(0, str(Path(__file__).parent.absolute()))
