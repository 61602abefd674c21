"""S2Match consistency training: perturbations, losses, EMA teacher.

The training engine lives in :mod:`waterlog.s2match.engine` (imported
explicitly; it pulls in the model and data layers).
"""

from .ema import ema_gamma, ema_update
from .losses import bce, poly_lr, ss_consistency_loss, supervised_loss, total_loss, ws_consistency_loss
from .perturb import binarize, complementary_dropout_pair, sample_half_mask, stochastic_depth_fuse

__all__ = [
    "bce",
    "binarize",
    "complementary_dropout_pair",
    "ema_gamma",
    "ema_update",
    "poly_lr",
    "sample_half_mask",
    "ss_consistency_loss",
    "stochastic_depth_fuse",
    "supervised_loss",
    "total_loss",
    "ws_consistency_loss",
]
