"""Losses, the adversarial training loop and checkpoints."""

from .losses import (LaplacianLoss, LossWeights, code_distance, loss_adv_d, loss_adv_g,
                     loss_cycle, loss_feat, loss_rec, loss_reg_r1, loss_srec, mesh_distance,
                     select_class)
from .trainer import (CHECKPOINT_MAGIC, TELEMETRY_FIELDS, Checkpoint, Trainer, TrainState,
                      load_checkpoint)

__all__ = [name for name in dir() if not name.startswith("_")]
