"""gridvl: a desk-scale video-text alignment lab.

A from-scratch tensor/autodiff core, single-modal encoders with divided
space-time attention, an asymmetric cross-modal encoder whose text side
attends word-wise over per-frame salient-part trajectories, coarse and
token-wise contrastive alignment with a momentum queue, and masked-word /
match objectives, all trained and probed on a synthetic moving-object
grid corpus with known trajectories.
"""

from .config import ConfigError, RunConfig, VARIANT_PRESETS
from .rng import Rng
from .tensor import (
    ContractError,
    NumericError,
    Parameter,
    ShapeError,
    Tensor,
    backward,
    no_grad,
    precision_bits,
    set_precision,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "NumericError",
    "Parameter",
    "Rng",
    "RunConfig",
    "ShapeError",
    "Tensor",
    "VARIANT_PRESETS",
    "backward",
    "no_grad",
    "precision_bits",
    "set_precision",
    "__version__",
]
