from typing import Optional

import torch
from torch.utils.tensorboard import SummaryWriter

from isds.utils.logging import get_logger

logger = get_logger(__name__)


class TraceWriter:
    """
    Per-epoch scalar traces of a training run. Without `log_dir` every call is a no-op,
    so training loops can call it unconditionally.
    """

    def __init__(self, log_dir: Optional[str] = None, tb_writer: Optional[SummaryWriter] = None):
        self.tb_writer = tb_writer
        if self.tb_writer is None and log_dir is not None:
            self.tb_writer = SummaryWriter(log_dir=log_dir)
            logger.info(f"writing tensorboard traces to {log_dir}")

    @property
    def enabled(self) -> bool:
        return self.tb_writer is not None

    def on_epoch_end(self, stage: str, epoch: int, logs: dict, restart: Optional[int] = None):
        if not self.enabled:
            return
        prefix = stage if restart is None else f"{stage}/restart_{restart}"
        for k, v in logs.items():
            if isinstance(v, torch.Tensor) and v.numel() == 1:
                v = v.item()
            if isinstance(v, (int, float)):
                self.tb_writer.add_scalar(f"{prefix}/{k}", v, epoch)
        self.tb_writer.flush()

    def close(self):
        if self.enabled:
            self.tb_writer.close()
