"""Figures for a finished run: training curves, qualitative slices,
attention panels and an index page that ties them together."""

from __future__ import annotations

import html
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402

from .domain import SUBREGIONS, derive_compound_masks  # noqa: E402
from .metrics import CaseMetrics  # noqa: E402
from .trainer import EpochRecord  # noqa: E402

# RGBA per label: background transparent, NCR red, ED orange, ET green
LABEL_COLOURS = np.array(
    [
        [0.0, 0.0, 0.0, 0.0],
        [0.85, 0.1, 0.1, 0.6],
        [1.0, 0.6, 0.0, 0.6],
        [0.1, 0.75, 0.2, 0.6],
    ]
)
LABEL_CMAP = ListedColormap(LABEL_COLOURS)
# fixed PNG metadata so repeated renders are byte-identical
PNG_METADATA = {"Software": None}


def _save(fig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=PNG_METADATA)
    plt.close(fig)
    return path


# ------------------------------------------------------------ curves


def plot_training_curves(
    records: Sequence[EpochRecord], path: Union[str, Path], best_epoch: Optional[int] = None
) -> Path:
    """Loss, soft Dice and learning rate against epoch, with the best epoch marked."""
    if not records:
        raise ValueError("no epoch records to plot")
    ep = [r.epoch for r in records]
    if best_epoch is None:
        best_epoch = min(records, key=lambda r: r.val_loss).epoch
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
    axes[0].plot(ep, [r.train_loss for r in records], label="train")
    axes[0].plot(ep, [r.val_loss for r in records], label="val")
    axes[0].set_ylabel("loss")
    axes[1].plot(ep, [r.train_dice for r in records], label="train")
    axes[1].plot(ep, [r.val_dice for r in records], label="val")
    axes[1].set_ylabel("soft Dice")
    axes[1].set_ylim(0, 1)
    axes[2].plot(ep, [r.lr for r in records], color="k")
    axes[2].set_yscale("log")
    axes[2].set_ylabel("learning rate")
    for ax in axes:
        ax.set_xlabel("epoch")
        ax.axvline(best_epoch, color="grey", ls="--", lw=1)
    axes[0].legend()
    axes[1].legend()
    fig.tight_layout()
    return _save(fig, path)


# ------------------------------------------------------------ case panels


def max_wt_slice(labels: np.ndarray) -> int:
    """Axial (last-axis) slice with the largest whole-tumour area; centre if none."""
    area = derive_compound_masks(labels).wt.sum(axis=(0, 1))
    if area.max() == 0:
        return labels.shape[2] // 2
    return int(np.argmax(area))


COLUMNS = ("t1ce", "gt_overlay", "pred_overlay", "error_map",
           "attention_NCR", "attention_ED", "attention_ET")
DEFAULT_COLUMNS = ("t1ce", "gt_overlay", "pred_overlay", "error_map", "attention_ET")
T1CE = 1


@dataclass
class PanelSpec:
    """One row of a case figure.

    ``slice_index`` of None selects the axial slice with the largest
    whole-tumour area in the ground truth.
    """

    subject_id: str
    slice_index: Optional[int] = None
    columns: Tuple[str, ...] = DEFAULT_COLUMNS

    def __post_init__(self):
        self.columns = tuple(self.columns)
        if not self.columns:
            raise ValueError("a panel needs at least one column")
        bad = [c for c in self.columns if c not in COLUMNS]
        if bad:
            raise ValueError(f"unknown panel columns {bad}; choose from {COLUMNS}")

    def needs_attention(self) -> bool:
        return any(c.startswith("attention_") for c in self.columns)

    def resolve_slice(self, gt: np.ndarray) -> int:
        z = max_wt_slice(gt) if self.slice_index is None else self.slice_index
        if not 0 <= z < gt.shape[2]:
            raise ValueError(f"slice {z} out of range for depth {gt.shape[2]}")
        return z


@dataclass
class CaseData:
    image: np.ndarray  # (4, D, H, W)
    gt: np.ndarray
    pred: np.ndarray
    attn: Optional[np.ndarray] = None  # (3, D, H, W) sigmoid maps
    label: str = ""


def error_map(gt: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """Voxel-wise label disagreement."""
    return np.asarray(gt) != np.asarray(pred)


def _draw(ax, column: str, case: CaseData, z: int) -> None:
    base = case.image[T1CE][:, :, z].T
    ax.axis("off")
    if column.startswith("attention_"):
        k = SUBREGIONS.index(column.split("_", 1)[1])
        ax.imshow(case.attn[k][:, :, z].T, cmap="hot", vmin=0, vmax=1, origin="lower")
        ax.set_title(f"{SUBREGIONS[k]} attention", fontsize=9)
        return
    ax.imshow(base, cmap="gray", origin="lower")
    if column == "gt_overlay":
        ax.imshow(case.gt[:, :, z].T, cmap=LABEL_CMAP, vmin=0, vmax=3, origin="lower",
                  interpolation="nearest")
    elif column == "pred_overlay":
        ax.imshow(case.pred[:, :, z].T, cmap=LABEL_CMAP, vmin=0, vmax=3, origin="lower",
                  interpolation="nearest")
    elif column == "error_map":
        err = error_map(case.gt[:, :, z], case.pred[:, :, z]).T
        rgba = np.zeros(err.shape + (4,))
        rgba[err] = (1.0, 0.0, 1.0, 0.9)
        ax.imshow(rgba, origin="lower", interpolation="nearest")
    ax.set_title({"t1ce": "T1ce", "gt_overlay": "ground truth", "pred_overlay": "prediction",
                  "error_map": "error map"}[column], fontsize=9)


def render_case_panels(
    rows: Sequence[Tuple[PanelSpec, CaseData]], path: Union[str, Path], title: str = ""
) -> Path:
    """One figure row per case; all rows share the first spec's columns."""
    if not rows:
        raise ValueError("no cases to render")
    columns = rows[0][0].columns
    fig, axes = plt.subplots(len(rows), len(columns), figsize=(2.6 * len(columns), 2.7 * len(rows)),
                             squeeze=False)
    for r, (spec, case) in enumerate(rows):
        if spec.needs_attention() and case.attn is None:
            raise ValueError(f"{spec.subject_id}: attention maps required by columns {spec.columns}")
        z = spec.resolve_slice(case.gt)
        for c, column in enumerate(columns):
            _draw(axes[r, c], column, case, z)
        label = case.label or spec.subject_id
        axes[r, 0].text(-0.08, 0.5, f"{label}\nz={z}", transform=axes[r, 0].transAxes,
                        ha="right", va="center", fontsize=8)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def render_case_panel(spec: PanelSpec, case: CaseData, path: Union[str, Path]) -> Path:
    return render_case_panels([(spec, case)], path)


def render_attention_panel(
    subject_id: str,
    gt: np.ndarray,
    attn: np.ndarray,
    path: Union[str, Path],
    slice_index: Optional[int] = None,
) -> Path:
    """Sub-region ground truth (top) over sigmoid attention maps (bottom)."""
    if attn.shape[0] != len(SUBREGIONS) or attn.shape[1:] != gt.shape:
        raise ValueError(f"attention {attn.shape} does not match labels {gt.shape}")
    z = max_wt_slice(gt) if slice_index is None else slice_index
    fig, axes = plt.subplots(2, 3, figsize=(9, 6))
    for k, name in enumerate(SUBREGIONS):
        axes[0, k].imshow((gt[:, :, z] == k + 1).T, cmap="gray", vmin=0, vmax=1, origin="lower")
        axes[0, k].set_title(f"{name} ground truth", fontsize=9)
        im = axes[1, k].imshow(attn[k][:, :, z].T, cmap="hot", vmin=0, vmax=1, origin="lower")
        axes[1, k].set_title(f"{name} attention", fontsize=9)
        for ax in axes[:, k]:
            ax.axis("off")
    fig.colorbar(im, ax=axes[1].tolist(), shrink=0.8)
    fig.suptitle(f"{subject_id}  slice {z}")
    return _save(fig, path)


# ------------------------------------------------------------ selection


def select_exemplars(cases: Sequence[CaseMetrics], k_worst: int = 2) -> Dict[str, List[str]]:
    """Best, median and worst cases by mean compound-region Dice.

    Ties break on subject id. ``failures`` lists the ``k_worst`` lowest.
    """
    if len(cases) < 3:
        raise ValueError(f"need at least 3 cases to pick exemplars, got {len(cases)}")
    ranked = sorted(cases, key=lambda c: (-c.mean_dice(), c.subject_id))
    return {
        "best": [ranked[0].subject_id],
        "median": [ranked[len(ranked) // 2].subject_id],
        "worst": [ranked[-1].subject_id],
        "failures": [c.subject_id for c in ranked[::-1][:k_worst]],
    }


# ------------------------------------------------------------ index


def write_index(run_dir: Union[str, Path], figures: Dict[str, Sequence[Union[str, Path]]],
                summary_rows: Optional[Sequence[dict]] = None) -> Path:
    """A static HTML page listing every figure by section."""
    run_dir = Path(run_dir)
    parts = ["<!doctype html><html><head><meta charset='utf-8'><title>run report</title></head><body>",
             f"<h1>{html.escape(run_dir.name)}</h1>"]
    if summary_rows:
        cols = list(summary_rows[0])
        parts.append("<table border='1'><tr>" + "".join(f"<th>{html.escape(c)}</th>" for c in cols) + "</tr>")
        for row in summary_rows:
            cells = []
            for c in cols:
                v = row[c]
                cells.append(f"<td>{v:.4f}</td>" if isinstance(v, float) else f"<td>{html.escape(str(v))}</td>")
            parts.append("<tr>" + "".join(cells) + "</tr>")
        parts.append("</table>")
    for section, paths in figures.items():
        parts.append(f"<h2>{html.escape(section)}</h2>")
        for p in paths:
            rel = Path(p).resolve().relative_to(run_dir.resolve())
            parts.append(f"<div><img src='{html.escape(str(rel))}'><p>{html.escape(rel.name)}</p></div>")
    parts.append("</body></html>")
    out = run_dir / "index.html"
    out.write_text("\n".join(parts))
    return out
