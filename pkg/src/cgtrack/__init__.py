"""One-stream single-object tracker built on a small numpy autograd core."""
from .model import CGTrack, ModelConfig, build_model, variant_config

__version__ = "0.1.0"

__all__ = ["CGTrack", "ModelConfig", "build_model", "variant_config", "__version__"]
