"""mnrv: fit a video into a small convolutional network, then ship the weights.

A frame-indexed encoder maps each frame to a tiny spatial embedding; a
pixel-shuffle decoder regenerates the frame from it. Once trained, the
embeddings plus quantized, entropy-coded decoder weights *are* the
compressed video, and the latent space supports frame interpolation and
masked inpainting for free.
"""

from .errors import ConfigError, ContainerError, FrameIOError, PlanningError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContainerError",
    "FrameIOError",
    "PlanningError",
    "__version__",
]
