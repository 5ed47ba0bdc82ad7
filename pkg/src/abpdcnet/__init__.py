"""ABPDC two-branch CT/MRI classifier with a feature-pyramid registration
auxiliary network, written on plain numpy with hand-derived gradients."""
import os as _os

# thread count for the BLAS backend; must be set before numpy loads
if "ABPDCNET_THREADS" in _os.environ:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["ABPDCNET_THREADS"])

from .abpdc import AbpdcParams, abpdc_backward, abpdc_forward  # noqa: E402
from .errors import ConfigError, FormatError, NumericError, ShapeError, UsageError  # noqa: E402
from .footprint import PyramidFootprint, footprint, gradient_kernels_3d  # noqa: E402
from .model import LossWeights, Model, ModelConfig  # noqa: E402

__all__ = ["AbpdcParams", "abpdc_forward", "abpdc_backward", "ConfigError", "FormatError",
           "NumericError", "ShapeError", "UsageError", "PyramidFootprint", "footprint",
           "gradient_kernels_3d", "LossWeights", "Model", "ModelConfig"]
