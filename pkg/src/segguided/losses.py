"""Composite objective: soft Dice + cross-entropy + lambda * attention BCE.

Tensors carry a leading batch axis: probabilities/logits are (B, C, D, H, W)
and targets are integer (B, D, H, W). Dice statistics are summed over the
whole batch per class before the ratio is taken.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .domain import NetworkOutput


@dataclass(frozen=True)
class LossConfig:
    lambda_attn: float = 0.1
    dice_epsilon: float = 1e-5
    seg_weight: float = 1.0

    def __post_init__(self):
        if self.lambda_attn < 0:
            raise ValueError("lambda_attn must be >= 0")
        if self.dice_epsilon <= 0:
            raise ValueError("dice_epsilon must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    """Scalar loss terms; ``total`` keeps its graph for backward."""

    total: torch.Tensor
    seg_dice: torch.Tensor
    seg_ce: torch.Tensor
    attn_bce: torch.Tensor

    def as_floats(self) -> dict:
        return {
            "total": float(self.total.detach()),
            "dice": float(self.seg_dice.detach()),
            "ce": float(self.seg_ce.detach()),
            "attn": float(self.attn_bce.detach()),
        }


def _check_shapes(pred: torch.Tensor, target: torch.Tensor, channels: int) -> None:
    if pred.dim() != target.dim() + 1 or pred.shape[1] != channels:
        raise ValueError(
            f"expected (B,{channels},...) predictions for (B,...) targets, "
            f"got {tuple(pred.shape)} and {tuple(target.shape)}"
        )
    if pred.shape[0] != target.shape[0] or pred.shape[2:] != target.shape[1:]:
        raise ValueError(
            f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} disagree"
        )


def dice_loss(probs: torch.Tensor, target: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """1 - mean over foreground classes {1,2,3} of the soft Dice ratio.

    A class absent from both prediction and target scores eps/eps = 1.
    """
    _check_shapes(probs, target, probs.shape[1])
    num_classes = probs.shape[1]
    onehot = F.one_hot(target.long(), num_classes).movedim(-1, 1).to(probs.dtype)
    dims = [0] + list(range(2, probs.dim()))
    inter = (probs * onehot).sum(dims)[1:]
    p_sum = probs.sum(dims)[1:]
    t_sum = onehot.sum(dims)[1:]
    ratio = (2 * inter + eps) / (p_sum + t_sum + eps)
    return 1 - ratio.mean()


def cross_entropy_loss(seg_logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check_shapes(seg_logits, target, seg_logits.shape[1])
    return F.cross_entropy(seg_logits, target.long())


def subregion_targets(target: torch.Tensor, num_subregions: int = 3) -> torch.Tensor:
    """(B, 3, ...) binary masks 1[target == i + 1] in (NCR, ED, ET) order."""
    idx = torch.arange(1, num_subregions + 1, device=target.device)
    shape = (1, num_subregions) + (1,) * (target.dim() - 1)
    return (target.unsqueeze(1) == idx.view(shape))


def attention_loss(attn_logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over the three channels of voxel-averaged BCE, from logits."""
    _check_shapes(attn_logits, target, attn_logits.shape[1])
    masks = subregion_targets(target, attn_logits.shape[1]).to(attn_logits.dtype)
    per_channel = F.binary_cross_entropy_with_logits(attn_logits, masks, reduction="none")
    dims = [0] + list(range(2, attn_logits.dim()))
    return per_channel.mean(dims).mean()


def total_loss(output: NetworkOutput, target: torch.Tensor, cfg: LossConfig = LossConfig()) -> LossBreakdown:
    seg_logits = output.seg_logits
    # keep the loss in fp32 under autocast
    if seg_logits.dtype in (torch.float16, torch.bfloat16):
        seg_logits = seg_logits.float()
    attn_logits = output.attn_logits
    if attn_logits.dtype in (torch.float16, torch.bfloat16):
        attn_logits = attn_logits.float()
    probs = torch.softmax(seg_logits, dim=1)
    d = dice_loss(probs, target, cfg.dice_epsilon)
    ce = cross_entropy_loss(seg_logits, target)
    attn = attention_loss(attn_logits, target)
    total = cfg.seg_weight * (d + ce) + cfg.lambda_attn * attn
    return LossBreakdown(total, d, ce, attn)


def soft_dice_score(probs: torch.Tensor, target: torch.Tensor, eps: float = 1e-5) -> float:
    """Foreground soft Dice, ``1 - dice_loss``."""
    return float(1 - dice_loss(probs, target, eps))
