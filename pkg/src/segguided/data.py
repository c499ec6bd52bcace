"""Dataset discovery, deterministic splitting, subject I/O and synthetic phantoms."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .domain import MODALITIES, LabelMap, MpMriVolume, ValidationError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class NamingConvention:
    """Maps each modality (and ``seg``) to the suffix used in file names.

    ``label_remap`` rewrites raw label values on load; the BraTS 2021 release
    stores enhancing tumour as 4.
    """

    name: str
    suffixes: Mapping[str, str]
    label_remap: Mapping[int, int] = field(default_factory=dict)

    def filename(self, subject_id: str, key: str, ext: str = ".nii.gz") -> str:
        return f"{subject_id}{self.suffixes[key]}{ext}"


BRATS2021 = NamingConvention(
    "brats2021",
    {"t1": "_t1", "t1ce": "_t1ce", "t2": "_t2", "flair": "_flair", "seg": "_seg"},
    {4: 3},
)
BRATS2023 = NamingConvention(
    "brats2023",
    {"t1": "-t1n", "t1ce": "-t1c", "t2": "-t2w", "flair": "-t2f", "seg": "-seg"},
)
NAMING_CONVENTIONS = {c.name: c for c in (BRATS2021, BRATS2023)}

FILE_KEYS = MODALITIES + ("seg",)
EXTENSIONS = (".nii.gz", ".raw")


@dataclass(frozen=True)
class SubjectEntry:
    subject_id: str
    paths: Mapping[str, Path]
    naming: NamingConvention = BRATS2021


@dataclass
class DatasetIndex:
    subjects: List[SubjectEntry]
    split_assignment: Dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.subjects)

    @property
    def subject_ids(self) -> List[str]:
        return [s.subject_id for s in self.subjects]

    def entry(self, subject_id: str) -> SubjectEntry:
        for s in self.subjects:
            if s.subject_id == subject_id:
                return s
        raise KeyError(subject_id)

    def split(self, name: str) -> List[SubjectEntry]:
        if not self.split_assignment:
            raise ValueError("index has not been split")
        return [s for s in self.subjects if self.split_assignment[s.subject_id] == name]


def _resolve_naming(naming: Union[str, NamingConvention]) -> NamingConvention:
    if isinstance(naming, NamingConvention):
        return naming
    try:
        return NAMING_CONVENTIONS[naming]
    except KeyError:
        raise ValueError(
            f"unknown naming convention {naming!r}; "
            f"known: {sorted(NAMING_CONVENTIONS)}"
        ) from None


def scan_dataset(
    root_dir: Union[str, Path],
    naming: Union[str, NamingConvention] = BRATS2021,
) -> DatasetIndex:
    """Index ``<root>/<subject_id>/<subject_id><suffix>.nii.gz`` files.

    Every subdirectory of ``root_dir`` is treated as one subject and must hold
    all four modalities plus the segmentation. Subjects are sorted by id.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    conv = _resolve_naming(naming)

    subjects = []
    problems = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        sid = sub.name
        paths = {}
        missing = []
        for key in FILE_KEYS:
            for ext in EXTENSIONS:
                candidate = sub / conv.filename(sid, key, ext)
                if candidate.exists():
                    paths[key] = candidate
                    break
            else:
                missing.append(conv.filename(sid, key))
        if missing:
            problems.append(f"{sid}: missing {', '.join(missing)}")
        else:
            subjects.append(SubjectEntry(sid, paths, conv))
    if problems:
        raise FileNotFoundError(
            "incomplete subjects in {}:\n  {}".format(root, "\n  ".join(problems))
        )
    if not subjects:
        raise FileNotFoundError(f"no subjects found under {root}")
    return DatasetIndex(subjects)


def split_sizes(n: int, fractions: Sequence[float]) -> Tuple[int, int, int]:
    # floor on train/val, test absorbs the remainder
    n_train = math.floor(fractions[0] * n + 1e-9)
    n_val = math.floor(fractions[1] * n + 1e-9)
    return n_train, n_val, n - n_train - n_val


def split_dataset(
    index: DatasetIndex,
    fractions: Sequence[float] = (0.70, 0.10, 0.20),
    seed: int = 42,
) -> DatasetIndex:
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three values summing to 1, got {fractions}")
    if any(f < 0 for f in fractions):
        raise ValueError(f"negative split fraction in {fractions}")
    ids = sorted(index.subject_ids)
    if len(ids) < 3:
        raise ValueError(f"need at least 3 subjects to split, got {len(ids)}")

    n_train, n_val, _ = split_sizes(len(ids), fractions)
    order = np.random.default_rng(seed).permutation(len(ids))
    assignment = {}
    for rank, i in enumerate(order):
        if rank < n_train:
            assignment[ids[i]] = "train"
        elif rank < n_train + n_val:
            assignment[ids[i]] = "val"
        else:
            assignment[ids[i]] = "test"
    entries = sorted(index.subjects, key=lambda s: s.subject_id)
    return DatasetIndex(entries, assignment)


def write_split_manifest(index: DatasetIndex, path: Union[str, Path], seed: int) -> None:
    lines = [f"# split_manifest v{MANIFEST_VERSION} seed={seed}"]
    lines += [f"{sid},{index.split_assignment[sid]}" for sid in index.subject_ids]
    Path(path).write_text("\n".join(lines) + "\n")


def read_split_manifest(path: Union[str, Path]) -> Dict[str, str]:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("# split_manifest v"):
        raise ValueError(f"{path} is not a split manifest")
    version = int(text[0].split()[2][1:])
    if version != MANIFEST_VERSION:
        raise ValueError(f"unsupported split manifest version {version}")
    out = {}
    for line in text[1:]:
        if not line.strip():
            continue
        sid, split = line.rsplit(",", 1)
        if split not in SPLITS:
            raise ValueError(f"bad split {split!r} for {sid}")
        out[sid] = split
    return out


def apply_split_manifest(index: DatasetIndex, assignment: Mapping[str, str]) -> DatasetIndex:
    missing = [sid for sid in index.subject_ids if sid not in assignment]
    if missing:
        raise ValueError(f"subjects absent from manifest: {missing[:5]}")
    return DatasetIndex(list(index.subjects), {sid: assignment[sid] for sid in index.subject_ids})


# ---------------------------------------------------------------- file I/O


def _read_array(path: Path) -> Tuple[np.ndarray, Tuple[float, float, float]]:
    name = path.name
    if name.endswith(".nii.gz") or name.endswith(".nii"):
        import nibabel as nib

        try:
            img = nib.load(str(path))
            data = np.asanyarray(img.dataobj)
        except Exception as exc:
            raise OSError(f"cannot read {path}: {exc}") from exc
        spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
        return np.asarray(data), spacing
    if name.endswith(".raw"):
        meta_path = path.with_suffix(".json")
        try:
            meta = json.loads(meta_path.read_text())
            data = np.fromfile(path, dtype=meta["dtype"]).reshape(meta["shape"])
        except Exception as exc:
            raise OSError(f"cannot read {path}: {exc}") from exc
        return data, tuple(meta.get("spacing", (1.0, 1.0, 1.0)))
    raise OSError(f"unsupported file type: {path}")


def _write_array(path: Path, data: np.ndarray, spacing) -> None:
    if path.name.endswith(".nii.gz"):
        import nibabel as nib

        img = nib.Nifti1Image(data, np.diag(list(spacing) + [1.0]))
        img.header.set_zooms(tuple(spacing))
        nib.save(img, str(path))
    else:
        data = np.ascontiguousarray(data)
        data.tofile(path)
        meta = {"dtype": data.dtype.str, "shape": list(data.shape), "spacing": list(spacing)}
        path.with_suffix(".json").write_text(json.dumps(meta))


def load_subject(entry: SubjectEntry) -> Tuple[MpMriVolume, LabelMap]:
    """Load one subject; channels stacked as (T1, T1ce, T2, FLAIR)."""
    chans = []
    spacing = None
    for key in MODALITIES:
        arr, sp = _read_array(Path(entry.paths[key]))
        if chans and arr.shape != chans[0].shape:
            raise ValidationError(
                f"{entry.subject_id}: {key} has shape {arr.shape}, "
                f"expected {chans[0].shape}"
            )
        chans.append(arr.astype(np.float32))
        spacing = spacing or sp
    seg, _ = _read_array(Path(entry.paths["seg"]))
    if seg.shape != chans[0].shape:
        raise ValidationError(
            f"{entry.subject_id}: segmentation shape {seg.shape} does not match "
            f"image shape {chans[0].shape}"
        )
    seg = np.rint(seg).astype(np.int16)
    for src, dst in entry.naming.label_remap.items():
        seg[seg == src] = dst
    channels = np.stack(chans)
    brain = np.any(channels != 0, axis=0)
    volume = MpMriVolume(channels, brain, entry.subject_id, spacing)
    return volume, LabelMap(seg.astype(np.uint8))


def write_subject(
    root: Union[str, Path],
    volume: MpMriVolume,
    labels: LabelMap,
    naming: Union[str, NamingConvention] = BRATS2021,
    fmt: str = "nifti",
) -> SubjectEntry:
    """Write a subject in the dataset layout. ``fmt`` is ``nifti`` or ``raw``."""
    conv = _resolve_naming(naming)
    ext = {"nifti": ".nii.gz", "raw": ".raw"}[fmt]
    sid = volume.subject_id
    if not sid:
        raise ValueError("volume has no subject id")
    sub = Path(root) / sid
    sub.mkdir(parents=True, exist_ok=True)
    paths = {}
    for c, key in enumerate(MODALITIES):
        paths[key] = sub / conv.filename(sid, key, ext)
        _write_array(paths[key], volume.channels[c].astype(np.float32), volume.voxel_spacing_mm)
    seg = labels.labels.copy()
    inverse = {v: k for k, v in conv.label_remap.items()}
    for src, dst in inverse.items():
        seg[labels.labels == src] = dst
    paths["seg"] = sub / conv.filename(sid, "seg", ext)
    _write_array(paths["seg"], seg, volume.voxel_spacing_mm)
    return SubjectEntry(sid, paths, conv)


# ---------------------------------------------------------------- phantoms

# per-channel baseline inside the brain (T1, T1ce, T2, FLAIR)
PHANTOM_BASELINE = np.array([1.0, 0.8, 1.2, 0.9])
# (class label, channel, offset)
PHANTOM_OFFSETS = ((2, 3, 1.0), (3, 1, 2.0), (1, 1, -1.0))


@dataclass(frozen=True)
class PhantomSpec:
    """Concentric tumour: ET ball inside an NCR shell inside an ED shell."""

    grid_size: Tuple[int, int, int] = (64, 64, 64)
    tumour_center: Optional[Tuple[float, float, float]] = None
    radii_vox: Tuple[float, float, float] = (4.0, 7.0, 12.0)
    noise_sigma: float = 0.0
    seed: int = 0
    subject_id: str = "phantom"

    def __post_init__(self):
        if len(self.grid_size) != 3 or min(self.grid_size) <= 0:
            raise ValidationError(f"invalid grid size {self.grid_size}")
        r = self.radii_vox
        if len(r) != 3 or not (0 < r[0] < r[1] < r[2]):
            raise ValidationError(
                f"radii must satisfy 0 < r_et < r_ncr < r_wt, got {r}"
            )
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be non-negative")
        for c, n in zip(self.center, self.grid_size):
            if c - r[2] < 0 or c + r[2] > n - 1:
                raise ValidationError(
                    f"tumour of radius {r[2]} at {self.center} does not fit in {self.grid_size}"
                )

    @property
    def center(self) -> Tuple[float, float, float]:
        if self.tumour_center is None:
            return tuple(n // 2 for n in self.grid_size)
        return tuple(self.tumour_center)


def phantom_labels(spec: PhantomSpec) -> np.ndarray:
    grids = np.indices(spec.grid_size, dtype=np.float64)
    d2 = sum((g - c) ** 2 for g, c in zip(grids, spec.center))
    r_et, r_ncr, r_wt = spec.radii_vox
    labels = np.zeros(spec.grid_size, dtype=np.uint8)
    labels[d2 <= r_wt**2] = 2
    labels[d2 <= r_ncr**2] = 1
    labels[d2 <= r_et**2] = 3
    return labels


def generate_phantom(spec: PhantomSpec) -> Tuple[MpMriVolume, LabelMap]:
    labels = phantom_labels(spec)
    shape = spec.grid_size
    grids = np.indices(shape, dtype=np.float64)
    semi = [0.46 * n for n in shape]
    mid = [(n - 1) / 2 for n in shape]
    brain = sum(((g - m) / s) ** 2 for g, m, s in zip(grids, mid, semi)) <= 1.0
    brain |= labels > 0

    channels = PHANTOM_BASELINE[:, None, None, None] * brain[None].astype(np.float64)
    for label, chan, offset in PHANTOM_OFFSETS:
        channels[chan][labels == label] += offset
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        noise = rng.normal(0.0, spec.noise_sigma, size=channels.shape)
        channels += noise * brain[None]
    volume = MpMriVolume(channels.astype(np.float32), brain, spec.subject_id)
    return volume, LabelMap(labels)


def random_phantom_specs(
    n: int,
    grid_size: Tuple[int, int, int] = (64, 64, 64),
    seed: int = 42,
    noise_sigma: float = 0.0,
    prefix: str = "Phantom",
) -> List[PhantomSpec]:
    """Draw ``n`` phantom specs with varied radii and tumour positions."""
    rng = np.random.default_rng(seed)
    small = min(grid_size)
    specs = []
    for i in range(n):
        r_wt = rng.uniform(0.14, 0.22) * small
        r_ncr = r_wt * rng.uniform(0.55, 0.7)
        r_et = r_ncr * rng.uniform(0.4, 0.6)
        margin = math.ceil(r_wt) + 1
        center = tuple(
            float(rng.integers(margin, g - margin)) if g - margin > margin else g // 2
            for g in grid_size
        )
        specs.append(
            PhantomSpec(
                grid_size=tuple(grid_size),
                tumour_center=center,
                radii_vox=(r_et, r_ncr, r_wt),
                noise_sigma=noise_sigma,
                seed=seed * 100_003 + i,
                subject_id=f"{prefix}_{i:05d}",
            )
        )
    return specs


def write_synthetic_dataset(
    root: Union[str, Path],
    n: int,
    grid_size: Tuple[int, int, int] = (64, 64, 64),
    seed: int = 42,
    noise_sigma: float = 0.0,
    fmt: str = "nifti",
) -> DatasetIndex:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for spec in random_phantom_specs(n, grid_size, seed, noise_sigma):
        if (root / spec.subject_id).exists():
            continue
        volume, labels = generate_phantom(spec)
        write_subject(root, volume, labels, fmt=fmt)
    log.info("wrote %d phantoms to %s", n, root)
    return scan_dataset(root)
