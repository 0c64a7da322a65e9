"""WERank: per-layer gram-to-identity regularization against dimensional collapse.

Everything runs on a small numpy reverse-mode autodiff engine
(:mod:`werank.autodiff`); spectra come from a one-sided Jacobi SVD
(:mod:`werank.linalg`).
"""

from .autodiff import Node, backward, const, gradcheck, leaf
from .evaluation import ProbeConfig, RankReport, derive_ranks, probe_over_splits
from .linalg import Spectrum, effective_rank, numerical_rank, svd
from .losses import (InfoNceConfig, VicregConfig, WERankConfig, byol_loss, infonce_loss,
                     total_loss, vicreg_loss, werank, werank_layer)
from .training import OptimizerConfig, TrainRunConfig, train_ema, train_siamese

__version__ = "0.1.0"
