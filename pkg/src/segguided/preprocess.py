"""Normalisation, patch extraction and online augmentation.

Arrays follow the (C, D, H, W) image / (D, H, W) label layout used across the
package. Randomness always comes from an explicit ``numpy.random.Generator``;
use :func:`sample_rng` to derive per-sample streams so that results do not
depend on worker count or iteration order.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .domain import LabelMap, MpMriVolume, ValidationError

Patch = Union[int, Sequence[int]]

ZSCORE_MIN_STD = 1e-6


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index]))


def zscore_normalize(volume: MpMriVolume) -> MpMriVolume:
    """Per-channel z-score over brain-mask voxels; zero outside the mask."""
    mask = volume.brain_mask
    if not mask.any():
        raise ValidationError(f"{volume.subject_id}: empty brain mask")
    out = np.zeros(volume.channels.shape, dtype=np.float32)
    for c, chan in enumerate(volume.channels):
        vals = chan[mask].astype(np.float64)
        mean = vals.mean()
        std = vals.std()
        if std < ZSCORE_MIN_STD:
            continue
        out[c][mask] = ((vals - mean) / std).astype(np.float32)
    return replace(volume, channels=out)


def _as_patch(patch: Patch) -> Tuple[int, int, int]:
    if isinstance(patch, int):
        return (patch, patch, patch)
    return tuple(int(p) for p in patch)


def extract(arr: np.ndarray, start: Sequence[int], patch: Sequence[int], fill=0) -> np.ndarray:
    """Copy ``arr[..., start:start+patch]``; out-of-range voxels get ``fill``.

    ``start`` may be negative or run past the end (zero padding).
    """
    spatial = arr.shape[-3:]
    out = np.full(arr.shape[:-3] + tuple(patch), fill, dtype=arr.dtype)
    src, dst = [], []
    for s, p, n in zip(start, patch, spatial):
        lo, hi = max(s, 0), min(s + p, n)
        if hi <= lo:
            return out
        src.append(slice(lo, hi))
        dst.append(slice(lo - s, hi - s))
    out[(Ellipsis, *dst)] = arr[(Ellipsis, *src)]
    return out


def crop_start(center: Sequence[int], shape: Sequence[int], patch: Sequence[int]) -> Tuple[int, ...]:
    """Patch origin for a given centre, clamped so the patch stays in bounds.

    Along axes shorter than the patch the volume is centred instead.
    """
    start = []
    for c, n, p in zip(center, shape, patch):
        if n >= p:
            start.append(int(min(max(c - p // 2, 0), n - p)))
        else:
            start.append(n // 2 - p // 2)
    return tuple(start)


def sample_crop_center(
    labels: np.ndarray, fg_prob: float, rng: np.random.Generator
) -> Tuple[Tuple[int, int, int], bool]:
    """Returns the crop centre and whether it came from the foreground branch."""
    if rng.random() < fg_prob:
        fg = np.flatnonzero(labels > 0)
        if fg.size:
            flat = fg[rng.integers(fg.size)]
            return tuple(int(i) for i in np.unravel_index(flat, labels.shape)), True
    return tuple(int(rng.integers(n)) for n in labels.shape), False


def tumour_biased_crop(
    channels: np.ndarray,
    labels: np.ndarray,
    patch: Patch = 128,
    fg_prob: float = 0.8,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    rng = rng if rng is not None else np.random.default_rng()
    patch = _as_patch(patch)
    center, _ = sample_crop_center(labels, fg_prob, rng)
    start = crop_start(center, labels.shape, patch)
    return extract(channels, start, patch), extract(labels, start, patch)


def center_crop(
    channels: np.ndarray, labels: Optional[np.ndarray], patch: Patch = 128
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    patch = _as_patch(patch)
    shape = channels.shape[-3:]
    start = tuple(n // 2 - p // 2 for n, p in zip(shape, patch))
    lab = extract(labels, start, patch) if labels is not None else None
    return extract(channels, start, patch), lab


def center_crop_start(shape: Sequence[int], patch: Patch = 128) -> Tuple[int, ...]:
    return tuple(n // 2 - p // 2 for n, p in zip(shape, _as_patch(patch)))


# ------------------------------------------------------------ augmentation


@dataclass(frozen=True)
class AugmentationConfig:
    flip_prob: float = 0.5
    rot90_prob: float = 0.5
    elastic_prob: float = 0.2
    elastic_grid: int = 4
    elastic_sigma: float = 4.0
    scale_prob: float = 1.0
    intensity_scale_range: Tuple[float, float] = (0.9, 1.1)
    brightness_prob: float = 1.0
    brightness_shift_range: Tuple[float, float] = (-0.1, 0.1)
    noise_prob: float = 1.0
    noise_sigma: float = 0.05
    blur_prob: float = 0.15
    blur_sigma_range: Tuple[float, float] = (0.5, 1.0)
    channel_dropout_prob: float = 0.1
    seed: int = 42

    def __post_init__(self):
        for name in (
            "flip_prob", "rot90_prob", "elastic_prob", "scale_prob",
            "brightness_prob", "noise_prob", "blur_prob", "channel_dropout_prob",
        ):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name}={v} is not a probability")
        for name in ("intensity_scale_range", "brightness_shift_range", "blur_sigma_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValidationError(f"{name} is not ordered: {(lo, hi)}")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.noise_sigma < 0 or self.elastic_sigma < 0 or self.elastic_grid < 2:
            raise ValidationError("invalid noise/elastic parameters")

    @classmethod
    def disabled(cls, seed: int = 42) -> "AugmentationConfig":
        return cls(
            flip_prob=0.0, rot90_prob=0.0, elastic_prob=0.0, scale_prob=0.0,
            brightness_prob=0.0, noise_prob=0.0, blur_prob=0.0,
            channel_dropout_prob=0.0, seed=seed,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationConfig":
        return cls(**d)


def flip(arr: np.ndarray, axis: int) -> np.ndarray:
    """Flip along spatial ``axis`` (0..2) of a (..., D, H, W) array."""
    return np.flip(arr, axis=arr.ndim - 3 + axis)


def rot90(arr: np.ndarray, k: int, plane: Tuple[int, int]) -> np.ndarray:
    off = arr.ndim - 3
    return np.rot90(arr, k=k, axes=(plane[0] + off, plane[1] + off))


def _elastic_coords(shape, grid: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    coarse = rng.normal(0.0, sigma, size=(3, grid, grid, grid))
    zoom = [n / grid for n in shape]
    disp = np.stack([ndimage.zoom(c, zoom, order=3, mode="nearest") for c in coarse])
    disp = disp[(slice(None), *(slice(0, n) for n in shape))]
    return np.indices(shape, dtype=np.float64) + disp


def elastic_deform(channels, labels, grid, sigma, rng):
    coords = _elastic_coords(labels.shape, grid, sigma, rng)
    img = np.stack(
        [ndimage.map_coordinates(c, coords, order=1, mode="constant", cval=0.0) for c in channels]
    ).astype(channels.dtype)
    lab = ndimage.map_coordinates(labels, coords, order=0, mode="constant", cval=0)
    return img, lab.astype(labels.dtype)


def augment(
    channels: np.ndarray,
    labels: np.ndarray,
    cfg: AugmentationConfig,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """Random spatial (image + labels) then intensity (image only) transforms."""
    img, lab = channels, labels
    for axis in range(3):
        if rng.random() < cfg.flip_prob:
            img, lab = flip(img, axis), flip(lab, axis)
    if rng.random() < cfg.rot90_prob:
        # only planes whose two sides match keep the patch shape
        planes = [p for p in ((0, 1), (0, 2), (1, 2)) if lab.shape[p[0]] == lab.shape[p[1]]]
        if planes:
            plane = planes[rng.integers(len(planes))]
            k = int(rng.integers(1, 4))
            img, lab = rot90(img, k, plane), rot90(lab, k, plane)
    img = np.ascontiguousarray(img)
    lab = np.ascontiguousarray(lab)
    if rng.random() < cfg.elastic_prob:
        img, lab = elastic_deform(img, lab, cfg.elastic_grid, cfg.elastic_sigma, rng)

    n_chan = img.shape[0]
    if rng.random() < cfg.scale_prob:
        scale = rng.uniform(*cfg.intensity_scale_range, size=n_chan)
        img = img * scale[:, None, None, None].astype(img.dtype)
    if rng.random() < cfg.brightness_prob:
        shift = rng.uniform(*cfg.brightness_shift_range, size=n_chan)
        img = img + shift[:, None, None, None].astype(img.dtype)
    if rng.random() < cfg.noise_prob and cfg.noise_sigma > 0:
        img = img + rng.normal(0.0, cfg.noise_sigma, size=img.shape).astype(img.dtype)
    if rng.random() < cfg.blur_prob:
        s = rng.uniform(*cfg.blur_sigma_range)
        img = np.stack([ndimage.gaussian_filter(c, s) for c in img])
    if rng.random() < cfg.channel_dropout_prob:
        img = img.copy()
        img[rng.integers(n_chan)] = 0
    return img, lab


def preprocess_subject(volume: MpMriVolume, labels: LabelMap) -> Tuple[np.ndarray, np.ndarray]:
    """Normalised channel array and raw label array, ready for cropping."""
    return zscore_normalize(volume).channels, labels.labels
