import logging
import time
from collections import defaultdict
from typing import Dict, List, Optional

import numpy as np

logger = logging.getLogger(__name__)


class Timer:
    TIMES = defaultdict(list)

    def __init__(self, name: str, registry: Optional[Dict[str, List[float]]] = None, cross_point: int = 50):
        self.name = name
        self.cross_point = cross_point
        self._registry = Timer.TIMES if registry is None else registry
        self._start_time = -1.0
        self.elapsed = 0.0

    def __enter__(self):
        self._start_time = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.elapsed = time.perf_counter() - self._start_time
        times = self._registry.setdefault(self.name, [])
        times.append(self.elapsed)
        if len(times) % self.cross_point == 0:
            logger.debug("%s: %.4f s (mean of %d)", self.name, np.mean(times), len(times))
