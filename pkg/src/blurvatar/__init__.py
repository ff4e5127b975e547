"""blurvatar: sharp animatable 3D Gaussian avatars from motion-blurred multi-view video.

The package recovers a canonical articulated Gaussian scene and the sub-frame
motion of each exposure by optimizing through a physics-based blur formation
model: a blurry frame is the average of virtual sharp renders along a spline
pose trajectory. A synthetic benchmark generator, evaluation metrics, a
finite-difference gradient harness and a CLI round out the toolkit.
"""

__version__ = "0.1.0"

from .config import RunConfig, default_config, load_config
from .errors import (
    BlurvatarError,
    ConfigError,
    DataError,
    GradientError,
    ParameterError,
    StructuralError,
)

__all__ = [
    "RunConfig",
    "default_config",
    "load_config",
    "BlurvatarError",
    "ConfigError",
    "DataError",
    "GradientError",
    "ParameterError",
    "StructuralError",
    "__version__",
]
