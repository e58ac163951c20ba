import math
from typing import List, Optional

from skorch.callbacks import Callback
from tensorboardX import SummaryWriter

from errors import NonFiniteLoss


class LossCurve(Callback):
    """Records every training-step loss, aborts on a non-finite one and stops after `max_steps`."""

    def __init__(self, max_steps: Optional[int] = None):
        self.max_steps = max_steps
        self.losses_: List[float] = []

    def initialize(self):
        self.losses_ = []
        return super().initialize()

    # pylint: disable=arguments-differ
    def on_batch_end(self, net, batch=None, training=None, loss=None, **kwargs):
        if not training:
            return
        value = float(loss.item())
        step = len(self.losses_)
        if not math.isfinite(value):
            raise NonFiniteLoss(step, value)
        self.losses_.append(value)
        if self.max_steps is not None and len(self.losses_) >= self.max_steps:
            # skorch ends fit() cleanly on KeyboardInterrupt and still runs on_train_end
            raise KeyboardInterrupt


class Tensorboard(Callback):
    def __init__(self, save_path: str, tag: str = "train/loss"):
        self._save_path = save_path
        self._tag = tag

        self._writer: Optional[SummaryWriter] = None
        self._step = 0

    def initialize(self):
        self._writer = SummaryWriter(self._save_path)
        self._step = 0
        return super().initialize()

    # pylint: disable=arguments-differ
    def on_batch_end(self, net, batch=None, training=None, loss=None, **kwargs):
        if training:
            self._writer.add_scalar(self._tag, float(loss.item()), global_step=self._step)
            self._step += 1

    
    def closed(self) -> bool:
        return self._writer is None

    def close(self) -> None:
        if self._writer is not None:
            self._writer.close()
            self._writer = None

    def on_train_end(self, net, X=None, y=None, **kwargs):
        self._step = 0
        self.close()
