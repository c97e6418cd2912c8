"""Multi-label protein localization pipeline on a numpy autodiff core.

Subpackages are imported lazily by the user; this module only exposes the
version and the most common entry points.
"""
from .model import Model, NetworkConfig, build_network, load_checkpoint, save_checkpoint

__all__ = ["Model", "NetworkConfig", "build_network", "load_checkpoint", "save_checkpoint", "__version__"]
__version__ = "0.1.0"
