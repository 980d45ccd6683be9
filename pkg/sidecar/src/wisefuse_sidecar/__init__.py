"""HTTP embedding service for the wisefuse encoder wire protocol."""

from .app import SidecarConfig, create_app
from .synth import echo_vector

__version__ = "0.1.0"

__all__ = ["SidecarConfig", "create_app", "echo_vector"]
