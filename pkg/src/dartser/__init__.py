"""Differentiable cell search for CNN+LSTM speech-emotion classifiers, on a small numpy autodiff core."""

from .cell import Genotype, NetworkConfig, derive_genotype, export_genotype, import_genotype
from .config import RunConfig, load_config
from .tensor import Tensor, no_grad, precision

__all__ = [
    "Genotype",
    "NetworkConfig",
    "RunConfig",
    "Tensor",
    "derive_genotype",
    "export_genotype",
    "import_genotype",
    "load_config",
    "no_grad",
    "precision",
]
__version__ = "0.1.0"
