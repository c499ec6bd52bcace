"""Run configuration, stored as ``config.json`` in every run directory."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Tuple, Union

from .losses import LossConfig
from .network import NetworkConfig
from .preprocess import AugmentationConfig

CONFIG_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 2
    lr0: float = 1e-4
    lr_min: float = 1e-6
    weight_decay: float = 1e-5
    clip_norm: float = 1.0
    patience: int = 20
    seed: int = 42
    amp_enabled: bool = True
    patch: Tuple[int, int, int] = (128, 128, 128)
    fg_prob: float = 0.8
    crops_per_subject: int = 1
    num_workers: int = 0
    deterministic: bool = True
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    max_nonfinite_steps: int = 10

    def __post_init__(self):
        if isinstance(self.patch, int):
            object.__setattr__(self, "patch", (self.patch,) * 3)
        else:
            object.__setattr__(self, "patch", tuple(int(p) for p in self.patch))
        object.__setattr__(self, "betas", tuple(self.betas))
        if not 0 < self.lr_min < self.lr0:
            raise ValueError(f"need 0 < lr_min < lr0, got {self.lr_min}, {self.lr0}")
        if self.epochs <= 0 or self.batch_size <= 0 or self.clip_norm <= 0:
            raise ValueError("epochs, batch_size and clip_norm must be positive")
        if not 0 < self.patience <= self.epochs:
            raise ValueError(f"patience must be in (0, epochs], got {self.patience}")
        if self.weight_decay < 0 or not 0 <= self.fg_prob <= 1:
            raise ValueError("invalid weight_decay or fg_prob")
        if self.crops_per_subject < 1:
            raise ValueError("crops_per_subject must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch"] = list(self.patch)
        d["betas"] = list(self.betas)
        return d


@dataclass(frozen=True)
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    naming: str = "brats2021"
    split_fractions: Tuple[float, float, float] = (0.70, 0.10, 0.20)
    # phantom cohort generated by ``train --synthetic N``
    synthetic_grid: Tuple[int, int, int] = (64, 64, 64)
    synthetic_noise: float = 0.0

    def to_dict(self) -> dict:
        return {
            "version": CONFIG_VERSION,
            "network": self.network.to_dict(),
            "loss": self.loss.to_dict(),
            "train": self.train.to_dict(),
            "augmentation": self.augmentation.to_dict(),
            "naming": self.naming,
            "split_fractions": list(self.split_fractions),
            "synthetic_grid": list(self.synthetic_grid),
            "synthetic_noise": self.synthetic_noise,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        version = d.get("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {version}")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known - {"version"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        if "network" in d:
            kwargs["network"] = NetworkConfig.from_dict(d["network"])
        if "loss" in d:
            kwargs["loss"] = LossConfig(**d["loss"])
        if "train" in d:
            kwargs["train"] = TrainConfig(**d["train"])
        if "augmentation" in d:
            aug = dict(d["augmentation"])
            for k in ("intensity_scale_range", "brightness_shift_range", "blur_sigma_range"):
                if k in aug:
                    aug[k] = tuple(aug[k])
            kwargs["augmentation"] = AugmentationConfig(**aug)
        for k in ("naming", "synthetic_noise"):
            if k in d:
                kwargs[k] = d[k]
        for k in ("split_fractions", "synthetic_grid"):
            if k in d:
                kwargs[k] = tuple(d[k])
        return cls(**kwargs)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))
