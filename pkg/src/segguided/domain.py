"""Value types and the label/region algebra shared across the package.

Label convention (BraTS adult glioma): 0 background, 1 necrotic core (NCR),
2 peritumoral oedema (ED, called SNFH in the 2023 release), 3 enhancing
tumour (ET). Compound evaluation regions are ET, TC = NCR | ET and
WT = NCR | ED | ET.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

NUM_CLASSES = 4
MODALITIES = ("t1", "t1ce", "t2", "flair")
SUBREGIONS = ("NCR", "ED", "ET")
REGIONS = ("ET", "TC", "WT")

# label values making up each region
SUBREGION_LABELS = {"NCR": (1,), "ED": (2,), "ET": (3,)}
REGION_LABELS = {"ET": (3,), "TC": (1, 3), "WT": (1, 2, 3)}


class ValidationError(ValueError):
    """Raised when a value violates a domain invariant."""


def check_labels(labels: np.ndarray) -> None:
    bad = np.setdiff1d(np.unique(labels), np.arange(NUM_CLASSES))
    if bad.size:
        raise ValidationError(
            f"label values outside {{0,1,2,3}}: {bad.tolist()}"
        )


@dataclass(frozen=True)
class MpMriVolume:
    """Four co-registered sequences (T1, T1ce, T2, FLAIR) and a brain mask."""

    channels: np.ndarray
    brain_mask: np.ndarray
    subject_id: str = ""
    voxel_spacing_mm: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.channels.ndim != 4 or self.channels.shape[0] != len(MODALITIES):
            raise ValidationError(
                f"expected 4xDxHxW channels, got shape {self.channels.shape}"
            )
        if self.brain_mask.shape != self.channels.shape[1:]:
            raise ValidationError(
                f"brain mask shape {self.brain_mask.shape} does not match "
                f"channel shape {self.channels.shape[1:]}"
            )
        if self.brain_mask.dtype != bool:
            object.__setattr__(self, "brain_mask", self.brain_mask.astype(bool))
        spacing = tuple(float(s) for s in self.voxel_spacing_mm)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValidationError(f"invalid voxel spacing {self.voxel_spacing_mm}")
        object.__setattr__(self, "voxel_spacing_mm", spacing)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.channels.shape[1:])


@dataclass(frozen=True)
class LabelMap:
    labels: np.ndarray

    def __post_init__(self):
        if self.labels.ndim != 3:
            raise ValidationError(f"label map must be 3D, got {self.labels.shape}")
        check_labels(self.labels)
        if self.labels.dtype != np.uint8:
            object.__setattr__(self, "labels", self.labels.astype(np.uint8))

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.labels.shape)


@dataclass(frozen=True)
class SubRegionMasks:
    ncr: np.ndarray
    ed: np.ndarray
    et: np.ndarray

    def as_dict(self) -> dict:
        return {"NCR": self.ncr, "ED": self.ed, "ET": self.et}


@dataclass(frozen=True)
class CompoundRegionMasks:
    et: np.ndarray
    tc: np.ndarray
    wt: np.ndarray

    def as_dict(self) -> dict:
        return {"ET": self.et, "TC": self.tc, "WT": self.wt}


@dataclass(frozen=True)
class NetworkOutput:
    """Segmentation logits (4 channels) and attention logits (NCR, ED, ET).

    Arrays may carry a leading batch axis. Attention probabilities are
    ``sigmoid(attn_logits)``; they are not stored.
    """

    seg_logits: object
    attn_logits: object
    meta: dict = field(default_factory=dict)


def _as_array(labels) -> np.ndarray:
    if isinstance(labels, LabelMap):
        return labels.labels
    arr = np.asarray(labels)
    check_labels(arr)
    return arr


def derive_subregion_masks(labels) -> SubRegionMasks:
    arr = _as_array(labels)
    return SubRegionMasks(ncr=arr == 1, ed=arr == 2, et=arr == 3)


def derive_compound_masks(labels) -> CompoundRegionMasks:
    arr = _as_array(labels)
    return CompoundRegionMasks(
        et=arr == 3,
        tc=(arr == 1) | (arr == 3),
        wt=arr > 0,
    )


def labels_from_logits(seg_logits) -> LabelMap:
    """Per-voxel argmax over a 4xDxHxW logit grid.

    Ties go to the lowest class index (``np.argmax`` returns the first
    maximum), so equal logits decode to background.
    """
    arr = seg_logits
    if hasattr(arr, "detach"):
        arr = arr.detach().cpu().numpy()
    arr = np.asarray(arr)
    if arr.ndim != 4 or arr.shape[0] != NUM_CLASSES:
        raise ValidationError(f"expected 4xDxHxW logits, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("non-finite logits")
    return LabelMap(np.argmax(arr, axis=0).astype(np.uint8))


def one_hot(labels, num_classes: int = NUM_CLASSES) -> np.ndarray:
    arr = _as_array(labels)
    return (arr[None] == np.arange(num_classes).reshape(-1, 1, 1, 1)).astype(
        np.float64
    )
