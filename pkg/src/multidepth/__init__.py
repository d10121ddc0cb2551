"""Multi-sample refinement of monocular metric depth maps."""

from .core import CameraIntrinsics, DepthMap, ImageTensor, NumericError, Rng

__version__ = "0.1.0"

__all__ = ["CameraIntrinsics", "DepthMap", "ImageTensor", "NumericError", "Rng", "__version__"]
