"""Self-supervised object segmentation from video by appearance-motion decomposition.

An appearance network segments a single frame into ``c`` soft masks, a motion
network describes how each pixel moves between two frames, and the two are
bound into *segment flow*: one flow vector per mask, spread over the mask and
used to warp one frame onto the other. The photometric reconstruction error
trains both networks without labels.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    CheckpointError,
    ConfigError,
    DatasetError,
    DegenerateMaskError,
    InvalidInputError,
    NonFiniteLossError,
    UndefinedMetricError,
)
from .nets import ModelConfig, SegFlowModel, build_model, load_checkpoint, save_checkpoint  # noqa: F401
from .ops import (  # noqa: F401
    LossConfig,
    compose_segment_flow,
    masked_pool,
    normalize_masks,
    reconstruction_loss,
    ssim_loss,
    warp_backward,
)
