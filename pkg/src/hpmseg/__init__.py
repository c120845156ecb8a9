"""Hard-patch-mining masked image modeling for 3D segmentation."""

from .config import RunConfig
from .estimators import HPMPretrainer, UNETRSegmenter
from .masking import Mask, MaskSchedule, generate_mask
from .metrics import MetricsReport, dsc, hd95
from .patching import PatchConfig, patchify, unpatchify
from .volume_io import PhantomSpec, Volume, generate_phantom

__version__ = "0.1.0"

__all__ = [
    "HPMPretrainer", "UNETRSegmenter", "RunConfig", "Mask", "MaskSchedule",
    "generate_mask", "MetricsReport", "dsc", "hd95", "PatchConfig", "patchify",
    "unpatchify", "PhantomSpec", "Volume", "generate_phantom",
]
