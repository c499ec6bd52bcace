"""Training loop: AdamW, per-epoch cosine LR, gradient clipping, optional AMP,
early stopping on validation loss, checkpointing and deterministic seeding."""

from __future__ import annotations

import csv
import logging
import math
import os
import random
from contextlib import nullcontext
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from .config import TrainConfig
from .data import SubjectEntry, load_subject
from .losses import LossConfig, total_loss
from .network import SegGuidedNet, save_checkpoint
from .preprocess import (
    AugmentationConfig,
    augment,
    center_crop,
    preprocess_subject,
    sample_rng,
    tumour_biased_crop,
)

log = logging.getLogger(__name__)

EPOCH_COLUMNS = ("epoch", "train_loss", "val_loss", "train_dice", "val_dice", "lr")
STEP_COLUMNS = ("epoch", "step", "total", "dice", "ce", "attn")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    train_dice: float
    val_dice: float
    lr: float


@dataclass
class FitResult:
    records: List[EpochRecord]
    best_epoch: int
    best_val_loss: float
    best_state: Dict[str, torch.Tensor]
    best_checkpoint: Optional[Path] = None
    stopped_early: bool = False
    skipped_steps: int = 0


def cosine_lr(epoch: float, cfg: TrainConfig) -> float:
    return cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1 + math.cos(math.pi * epoch / cfg.epochs))


def make_optimizer(net: torch.nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        net.parameters(), lr=cfg.lr0, betas=cfg.betas, eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )


def seed_everything(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.backends.cudnn.deterministic = True
        torch.backends.cudnn.benchmark = False
        torch.use_deterministic_algorithms(True, warn_only=True)


# ------------------------------------------------------------------ data

Subject = Union[SubjectEntry, Tuple[str, np.ndarray, np.ndarray]]


class PatchDataset(Dataset):
    """Training or validation patches.

    ``subjects`` holds either index entries (loaded and normalised on access)
    or ``(subject_id, normalised_channels, labels)`` triples. Training samples
    draw their randomness from ``(seed, epoch, index)`` only.
    """

    def __init__(
        self,
        subjects: Sequence[Subject],
        patch=(128, 128, 128),
        train: bool = True,
        fg_prob: float = 0.8,
        augmentation: Optional[AugmentationConfig] = None,
        seed: int = 42,
        crops_per_subject: int = 1,
    ):
        self.subjects = list(subjects)
        self.patch = patch
        self.train = train
        self.fg_prob = fg_prob
        self.augmentation = augmentation
        self.seed = seed
        self.crops = crops_per_subject if train else 1
        self.epoch = 0

    @property
    def subject_ids(self) -> List[str]:
        return [s.subject_id if isinstance(s, SubjectEntry) else s[0] for s in self.subjects]

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.subjects) * self.crops

    def _arrays(self, i: int) -> Tuple[np.ndarray, np.ndarray]:
        s = self.subjects[i]
        if isinstance(s, SubjectEntry):
            return preprocess_subject(*load_subject(s))
        return s[1], s[2]

    def __getitem__(self, idx: int):
        channels, labels = self._arrays(idx % len(self.subjects))
        if self.train:
            rng = sample_rng(self.seed, self.epoch, idx)
            img, lab = tumour_biased_crop(channels, labels, self.patch, self.fg_prob, rng)
            if self.augmentation is not None:
                img, lab = augment(img, lab, self.augmentation, rng)
        else:
            img, lab = center_crop(channels, labels, self.patch)
        img = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))
        lab = torch.from_numpy(np.ascontiguousarray(lab).astype(np.int64))
        return img, lab


def make_loader(ds: PatchDataset, cfg: TrainConfig, train: bool) -> DataLoader:
    if train:
        return DataLoader(
            ds,
            batch_size=cfg.batch_size,
            shuffle=True,
            num_workers=cfg.num_workers,
            generator=torch.Generator().manual_seed(cfg.seed),
            drop_last=False,
        )
    return DataLoader(ds, batch_size=1, shuffle=False, num_workers=cfg.num_workers)


# ------------------------------------------------------------------ loop


def _autocast(device: torch.device, enabled: bool):
    if not enabled:
        return nullcontext()
    return torch.autocast(device.type, dtype=torch.float16)


def amp_active(cfg: TrainConfig, device: torch.device) -> bool:
    return cfg.amp_enabled and device.type == "cuda"


def clip_gradients(params, max_norm: float) -> torch.Tensor:
    """Rescale gradients in place to global L2 norm <= ``max_norm``; returns the
    pre-clip norm (non-finite when any gradient is)."""
    return torch.nn.utils.clip_grad_norm_(params, max_norm)


def train_epoch(
    net: SegGuidedNet,
    loader,
    optimizer: torch.optim.Optimizer,
    cfg: TrainConfig,
    loss_cfg: LossConfig = LossConfig(),
    scaler: Optional[torch.amp.GradScaler] = None,
    device: Union[str, torch.device] = "cpu",
    epoch: int = 1,
    step_log: Optional[Callable[[dict], None]] = None,
) -> Dict[str, float]:
    """One pass over ``loader``. Returns running means and a skipped-step count."""
    device = torch.device(device)
    use_amp = amp_active(cfg, device)
    if scaler is None:
        scaler = torch.amp.GradScaler(device.type, enabled=use_amp)
    net.train()
    params = [p for p in net.parameters() if p.requires_grad]
    total = dice = 0.0
    n = skipped = bad_streak = 0
    for step, (x, y) in enumerate(loader):
        x, y = x.to(device), y.to(device)
        optimizer.zero_grad(set_to_none=True)
        with _autocast(device, use_amp):
            out = net(x)
        parts = total_loss(out, y, loss_cfg)
        if not torch.isfinite(parts.total):
            bad_streak += 1
            skipped += 1
            if scaler.is_enabled():
                scaler.update(scaler.get_scale() * 0.5)
            if bad_streak > cfg.max_nonfinite_steps:
                raise TrainingDiverged(
                    f"non-finite loss for {bad_streak} consecutive steps at epoch {epoch}, "
                    f"step {step}: {parts.as_floats()}"
                )
            continue
        bad_streak = 0
        scaler.scale(parts.total).backward()
        scaler.unscale_(optimizer)
        grad_norm = clip_gradients(params, cfg.clip_norm)
        if torch.isfinite(grad_norm):
            scaler.step(optimizer)
        else:
            skipped += 1
        scaler.update()

        vals = parts.as_floats()
        total += vals["total"]
        dice += 1.0 - vals["dice"]
        n += 1
        if step_log is not None:
            step_log({"epoch": epoch, "step": step, **vals})
    if n == 0:
        raise TrainingDiverged(f"no finite training step in epoch {epoch}")
    return {"train_loss": total / n, "train_dice": dice / n, "skipped_steps": skipped}


@torch.no_grad()
def validate(
    net: SegGuidedNet,
    loader,
    loss_cfg: LossConfig = LossConfig(),
    device: Union[str, torch.device] = "cpu",
) -> Tuple[float, float]:
    """Mean total loss and mean foreground soft Dice over validation subjects."""
    net.eval()
    losses, dices = [], []
    for x, y in loader:
        x, y = x.to(device), y.to(device)
        for i in range(x.shape[0]):
            parts = total_loss(net(x[i : i + 1]), y[i : i + 1], loss_cfg)
            losses.append(float(parts.total))
            dices.append(1.0 - float(parts.seg_dice))
    if not losses:
        raise ValueError("validation loader is empty")
    return float(np.mean(losses)), float(np.mean(dices))


def _write_csv_row(path: Path, columns, row: dict, header: bool) -> None:
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow(columns)
        w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns])


def read_epoch_records(path: Union[str, Path]) -> List[EpochRecord]:
    with open(path, newline="") as fh:
        return [
            EpochRecord(
                int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"]),
                float(r["train_dice"]), float(r["val_dice"]), float(r["lr"]),
            )
            for r in csv.DictReader(fh)
        ]


def fit(
    net: SegGuidedNet,
    train_data: PatchDataset,
    val_data: PatchDataset,
    cfg: TrainConfig = TrainConfig(),
    loss_cfg: LossConfig = LossConfig(),
    run_dir: Optional[Union[str, Path]] = None,
    device: Union[str, torch.device] = "cpu",
    allow_overlap: bool = False,
) -> FitResult:
    """Train with early stopping on validation loss.

    Only training and validation data are passed in, so a held-out test split
    cannot leak into model selection. ``allow_overlap`` permits validating on
    the training subjects (overfit checks).
    """
    overlap = set(train_data.subject_ids) & set(val_data.subject_ids)
    if overlap and not allow_overlap:
        raise ValueError(f"train and validation splits share subjects: {sorted(overlap)[:5]}")
    seed_everything(cfg.seed, cfg.deterministic)
    device = torch.device(device)
    net.to(device)
    if cfg.amp_enabled and device.type != "cuda":
        log.info("AMP requested on %s; running in float32", device.type)

    optimizer = make_optimizer(net, cfg)
    scaler = torch.amp.GradScaler(device.type, enabled=amp_active(cfg, device))
    train_loader = make_loader(train_data, cfg, train=True)
    val_loader = make_loader(val_data, cfg, train=False)

    paths = {}
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            "epochs": run_dir / "epochs.csv",
            "steps": run_dir / "log.csv",
            "best": run_dir / "best.ckpt",
            "last": run_dir / "last.ckpt",
        }
        for key in ("epochs", "steps"):
            paths[key].unlink(missing_ok=True)

    first_step = [True]

    def step_log(row):
        if paths:
            _write_csv_row(paths["steps"], STEP_COLUMNS, row, first_step[0])
            first_step[0] = False

    records: List[EpochRecord] = []
    best_loss, best_epoch, best_state = math.inf, 0, {}
    skipped = 0
    stopped = False
    for epoch in range(1, cfg.epochs + 1):
        lr = cosine_lr(epoch - 1, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        train_data.set_epoch(epoch)
        stats = train_epoch(
            net, train_loader, optimizer, cfg, loss_cfg, scaler, device, epoch, step_log
        )
        skipped += stats["skipped_steps"]
        val_loss, val_dice = validate(net, val_loader, loss_cfg, device)
        rec = EpochRecord(epoch, stats["train_loss"], val_loss, stats["train_dice"], val_dice, lr)
        records.append(rec)
        if paths:
            _write_csv_row(paths["epochs"], EPOCH_COLUMNS, asdict(rec), epoch == 1)
        log.info(
            "epoch %d  train %.4f  val %.4f  train_dice %.4f  val_dice %.4f  lr %.2e",
            epoch, rec.train_loss, val_loss, rec.train_dice, val_dice, lr,
        )

        if val_loss < best_loss:
            best_loss, best_epoch = val_loss, epoch
            best_state = {k: v.detach().cpu().clone() for k, v in net.state_dict().items()}
            if paths:
                save_checkpoint(paths["best"], net, seed=cfg.seed, epoch=epoch, val_loss=val_loss)
        if paths:
            save_checkpoint(paths["last"], net, seed=cfg.seed, epoch=epoch, val_loss=val_loss)
        if epoch - best_epoch >= cfg.patience:
            stopped = True
            log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
            break

    return FitResult(
        records, best_epoch, best_loss, best_state, paths.get("best"), stopped, skipped
    )
