"""Segmentation-guided attention network for brain tumour MRI segmentation."""

from .domain import (
    CompoundRegionMasks,
    LabelMap,
    MpMriVolume,
    NetworkOutput,
    SubRegionMasks,
    ValidationError,
)
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = [
    "CompoundRegionMasks",
    "KERNEL_BACKEND",
    "LabelMap",
    "MpMriVolume",
    "NetworkOutput",
    "SubRegionMasks",
    "ValidationError",
    "__version__",
]
