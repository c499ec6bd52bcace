"""BraTS-style evaluation: DSC, HD95, sensitivity and specificity per region.

HD95 surfaces are foreground voxels with at least one 6-connected background
neighbour (the volume border counts as background). Directed distances run
from each surface voxel of one mask to the nearest surface voxel of the
other; the 95th percentile uses linear interpolation. When exactly one mask
is empty, :func:`hd95` returns ``inf`` and :func:`empty_policy` later swaps it
for the largest finite value in the cohort.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import kernels
from .domain import (
    REGIONS,
    SUBREGIONS,
    LabelMap,
    derive_compound_masks,
    derive_subregion_masks,
)

SCHEMA_VERSION = 1
REGION_METRICS = ("dice", "hd95", "sensitivity", "specificity")


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")


def dsc(pred: np.ndarray, gt: np.ndarray, eps: float = 1e-5) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    _check_same_shape(pred, gt)
    inter = np.count_nonzero(pred & gt)
    return (2 * inter + eps) / (np.count_nonzero(pred) + np.count_nonzero(gt) + eps)


def surface_distances(
    a: np.ndarray, b: np.ndarray, spacing: Sequence[float] = (1.0, 1.0, 1.0)
) -> Tuple[np.ndarray, np.ndarray]:
    """Directed surface distances (a -> b, b -> a) in spacing units.

    Both masks must be non-empty.
    """
    a8 = np.ascontiguousarray(a, dtype=np.uint8)
    b8 = np.ascontiguousarray(b, dtype=np.uint8)
    surf_a = kernels.surface(a8).astype(bool)
    surf_b = kernels.surface(b8).astype(bool)
    spacing = tuple(float(s) for s in spacing)
    to_b = np.sqrt(kernels.squared_edt(surf_b.astype(np.uint8), spacing))
    to_a = np.sqrt(kernels.squared_edt(surf_a.astype(np.uint8), spacing))
    return to_b[surf_a], to_a[surf_b]


def hd95(pred: np.ndarray, gt: np.ndarray, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    _check_same_shape(pred, gt)
    has_p, has_g = pred.any(), gt.any()
    if not has_p and not has_g:
        return 0.0
    if not (has_p and has_g):
        return math.inf
    d_pg, d_gp = surface_distances(pred, gt, spacing)
    return float(max(np.percentile(d_pg, 95), np.percentile(d_gp, 95)))


def sensitivity_specificity(pred: np.ndarray, gt: np.ndarray) -> Tuple[float, float]:
    """TP/(TP+FN) and TN/(TN+FP); each is 1 when its denominator is zero."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    _check_same_shape(pred, gt)
    tp = np.count_nonzero(pred & gt)
    fn = np.count_nonzero(~pred & gt)
    fp = np.count_nonzero(pred & ~gt)
    tn = pred.size - tp - fn - fp
    sens = tp / (tp + fn) if tp + fn else 1.0
    spec = tn / (tn + fp) if tn + fp else 1.0
    return float(sens), float(spec)


def empty_policy(values: Sequence[float]) -> List[float]:
    """Replace ``inf`` HD95 entries with the cohort's largest finite value."""
    arr = np.asarray(values, dtype=np.float64)
    bad = ~np.isfinite(arr)
    if not bad.any():
        return arr.tolist()
    if bad.all():
        raise ValueError("no finite HD95 in cohort; cannot apply empty-mask policy")
    arr[bad] = arr[~bad].max()
    return arr.tolist()


@dataclass
class CaseMetrics:
    subject_id: str
    regions: Dict[str, Dict[str, float]]
    subregion_dice: Dict[str, float]
    # regions whose HD95 was replaced by the empty-mask policy
    hd95_imputed: Tuple[str, ...] = ()

    def mean_dice(self) -> float:
        return float(np.mean([self.regions[r]["dice"] for r in REGIONS]))

    def row(self) -> Dict[str, object]:
        out: Dict[str, object] = {"subject_id": self.subject_id}
        for r in REGIONS:
            for m in REGION_METRICS:
                out[f"{r}_{m}"] = self.regions[r][m]
        for s in SUBREGIONS:
            out[f"{s}_subregion_dice"] = self.subregion_dice[s]
        out["hd95_imputed"] = ";".join(self.hd95_imputed)
        return out


@dataclass
class CohortSummary:
    n_cases: int
    # stats[region][metric] -> {"mean", "std", "median"}
    stats: Dict[str, Dict[str, Dict[str, float]]]
    subregion_stats: Dict[str, Dict[str, float]]
    mean_dice_et_tc_wt: float
    n_imputed: Dict[str, int] = field(default_factory=dict)


def evaluate_case(
    subject_id: str,
    pred: Union[LabelMap, np.ndarray],
    gt: Union[LabelMap, np.ndarray],
    spacing: Sequence[float] = (1.0, 1.0, 1.0),
) -> CaseMetrics:
    p_reg = derive_compound_masks(pred).as_dict()
    g_reg = derive_compound_masks(gt).as_dict()
    regions = {}
    for r in REGIONS:
        sens, spec = sensitivity_specificity(p_reg[r], g_reg[r])
        regions[r] = {
            "dice": dsc(p_reg[r], g_reg[r]),
            "hd95": hd95(p_reg[r], g_reg[r], spacing),
            "sensitivity": sens,
            "specificity": spec,
        }
    p_sub = derive_subregion_masks(pred).as_dict()
    g_sub = derive_subregion_masks(gt).as_dict()
    sub = {s: dsc(p_sub[s], g_sub[s]) for s in SUBREGIONS}
    return CaseMetrics(subject_id, regions, sub)


def _stats(values: Iterable[float]) -> Dict[str, float]:
    arr = np.asarray(list(values), dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "median": float(np.median(arr))}


def apply_empty_policy(cases: Sequence[CaseMetrics]) -> List[CaseMetrics]:
    """Second pass over a finished cohort; region-wise HD95 imputation."""
    imputed: Dict[str, set] = {c.subject_id: set() for c in cases}
    out = [
        CaseMetrics(c.subject_id, {r: dict(v) for r, v in c.regions.items()}, dict(c.subregion_dice))
        for c in cases
    ]
    for r in REGIONS:
        raw = [c.regions[r]["hd95"] for c in cases]
        if all(math.isfinite(v) for v in raw):
            continue
        fixed = empty_policy(raw)
        for c, before, after in zip(out, raw, fixed):
            c.regions[r]["hd95"] = after
            if not math.isfinite(before):
                imputed[c.subject_id].add(r)
    for c in out:
        c.hd95_imputed = tuple(r for r in REGIONS if r in imputed[c.subject_id])
    return out


def summarize(cases: Sequence[CaseMetrics]) -> CohortSummary:
    if not cases:
        raise ValueError("empty cohort")
    cases = sorted(cases, key=lambda c: c.subject_id)
    stats = {
        r: {m: _stats(c.regions[r][m] for c in cases) for m in REGION_METRICS} for r in REGIONS
    }
    sub = {s: _stats(c.subregion_dice[s] for c in cases) for s in SUBREGIONS}
    mean_dice = float(np.mean([stats[r]["dice"]["mean"] for r in REGIONS]))
    n_imp = {r: sum(r in c.hd95_imputed for c in cases) for r in REGIONS}
    return CohortSummary(len(cases), stats, sub, mean_dice, n_imp)


def evaluate_cohort(
    predictions: Mapping[str, Union[LabelMap, np.ndarray]],
    references: Mapping[str, Union[LabelMap, np.ndarray]],
    spacings: Optional[Mapping[str, Sequence[float]]] = None,
) -> Tuple[List[CaseMetrics], CohortSummary]:
    """Score every reference subject against its prediction.

    Returns per-case metrics sorted by subject id (after the empty-mask HD95
    pass) and the cohort summary.
    """
    missing = sorted(set(references) - set(predictions))
    if missing:
        raise KeyError(f"no prediction for subject(s): {', '.join(missing)}")
    spacings = spacings or {}
    cases = [
        evaluate_case(sid, predictions[sid], references[sid], spacings.get(sid, (1.0, 1.0, 1.0)))
        for sid in sorted(references)
    ]
    cases = apply_empty_policy(cases)
    return cases, summarize(cases)


# ------------------------------------------------------------------ CSV


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def write_case_csv(cases: Sequence[CaseMetrics], path: Union[str, Path]) -> None:
    rows = [c.row() for c in cases]
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema_version: {SCHEMA_VERSION}\n")
        writer = csv.writer(fh)
        writer.writerow(list(rows[0]))
        for row in rows:
            writer.writerow([_fmt(v) for v in row.values()])


def read_case_csv(path: Union[str, Path]) -> List[CaseMetrics]:
    with open(path, newline="") as fh:
        header = fh.readline()
        if not header.startswith("# schema_version:"):
            raise ValueError(f"{path}: missing schema header")
        version = int(header.split(":")[1])
        if version != SCHEMA_VERSION:
            raise ValueError(f"{path}: unsupported schema version {version}")
        reader = csv.DictReader(fh)
        cases = []
        for row in reader:
            regions = {r: {m: float(row[f"{r}_{m}"]) for m in REGION_METRICS} for r in REGIONS}
            sub = {s: float(row[f"{s}_subregion_dice"]) for s in SUBREGIONS}
            imputed = tuple(x for x in row["hd95_imputed"].split(";") if x)
            cases.append(CaseMetrics(row["subject_id"], regions, sub, imputed))
    return cases


SUMMARY_COLUMNS = (
    "region", "n", "mean_dice", "std_dice", "median_dice", "hd95_mm",
    "sensitivity", "specificity",
)


def summary_rows(summary: CohortSummary) -> List[Dict[str, object]]:
    rows = []
    for r in REGIONS:
        s = summary.stats[r]
        rows.append({
            "region": r,
            "n": summary.n_cases,
            "mean_dice": s["dice"]["mean"],
            "std_dice": s["dice"]["std"],
            "median_dice": s["dice"]["median"],
            "hd95_mm": s["hd95"]["mean"],
            "sensitivity": s["sensitivity"]["mean"],
            "specificity": s["specificity"]["mean"],
        })
    for name in SUBREGIONS:
        s = summary.subregion_stats[name]
        rows.append({
            "region": f"{name}*",
            "n": summary.n_cases,
            "mean_dice": s["mean"],
            "std_dice": s["std"],
            "median_dice": s["median"],
            "hd95_mm": "",
            "sensitivity": "",
            "specificity": "",
        })
    rows.append({
        "region": "Mean (ET+TC+WT)",
        "n": summary.n_cases,
        "mean_dice": summary.mean_dice_et_tc_wt,
        "std_dice": "", "median_dice": "", "hd95_mm": "", "sensitivity": "", "specificity": "",
    })
    return rows


def write_summary_csv(summary: CohortSummary, path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema_version: {SCHEMA_VERSION}\n")
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        for row in summary_rows(summary):
            writer.writerow({k: _fmt(v) for k, v in row.items()})
