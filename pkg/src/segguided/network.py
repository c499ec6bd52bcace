"""SegGuidedNet: residual 3D encoder-decoder with a supervised attention branch."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn

from .domain import NetworkOutput

CHECKPOINT_FORMAT = "segguided-ckpt-v1"
NUM_LEVELS = 4


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 4
    num_classes: int = 4
    num_subregions: int = 3
    base_channels: int = 32
    # derived from base_channels when left empty: base * (1, 2, 4, 8) and base * 10
    channel_widths: Tuple[int, ...] = ()
    bottleneck_channels: int = 0
    dropout_p: float = 0.1
    leaky_slope: float = 0.01

    def __post_init__(self):
        b = self.base_channels
        if b <= 0:
            raise ValueError("base_channels must be positive")
        if not self.channel_widths:
            object.__setattr__(self, "channel_widths", (b, 2 * b, 4 * b, 8 * b))
        else:
            object.__setattr__(self, "channel_widths", tuple(int(w) for w in self.channel_widths))
        if not self.bottleneck_channels:
            object.__setattr__(self, "bottleneck_channels", 10 * b)
        if len(self.channel_widths) != NUM_LEVELS or min(self.channel_widths) <= 0:
            raise ValueError(f"channel_widths must be 4 positive ints, got {self.channel_widths}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    @property
    def gate_hidden(self) -> int:
        return max(self.channel_widths[0] // 2, 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_widths"] = list(d["channel_widths"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        if "channel_widths" in d:
            d["channel_widths"] = tuple(d["channel_widths"])
        return cls(**d)


class ResConvBlock(nn.Module):
    """conv3-IN-LReLU-conv3-IN-LReLU-dropout plus a residual projection.

    The projection is the identity when channel counts agree and a 1x1x1
    convolution otherwise.
    """

    def __init__(self, in_ch: int, out_ch: int, dropout_p: float = 0.1, slope: float = 0.01):
        super().__init__()
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, padding=1)
        self.norm1 = nn.InstanceNorm3d(out_ch, affine=True)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1)
        self.norm2 = nn.InstanceNorm3d(out_ch, affine=True)
        self.act = nn.LeakyReLU(slope, inplace=True)
        self.drop = nn.Dropout3d(dropout_p)
        self.proj = nn.Identity() if in_ch == out_ch else nn.Conv3d(in_ch, out_ch, 1)

    def forward(self, x):
        y = self.act(self.norm1(self.conv1(x)))
        y = self.drop(self.act(self.norm2(self.conv2(y))))
        return y + self.proj(x)


class SegAttentionGate(nn.Module):
    """Per-sub-region attention logits from the last decoder features.

    Channels are ordered (NCR, ED, ET); apply a sigmoid for maps in [0, 1].
    """

    def __init__(self, in_ch: int = 32, hidden: int = 16, out_ch: int = 3, slope: float = 0.01):
        super().__init__()
        self.in_ch = in_ch
        self.conv3 = nn.Conv3d(in_ch, hidden, 3, padding=1)
        self.norm = nn.InstanceNorm3d(hidden, affine=True)
        self.act = nn.LeakyReLU(slope, inplace=True)
        self.conv1 = nn.Conv3d(hidden, out_ch, 1)

    def forward(self, d1):
        if d1.shape[1] != self.in_ch:
            raise ValueError(f"attention gate expects {self.in_ch} channels, got {d1.shape[1]}")
        return self.conv1(self.act(self.norm(self.conv3(d1))))


class SegGuidedNet(nn.Module):
    def __init__(self, config: Optional[NetworkConfig] = None):
        super().__init__()
        self.config = cfg = config or NetworkConfig()
        w = cfg.channel_widths
        p, s = cfg.dropout_p, cfg.leaky_slope

        ins = (cfg.in_channels,) + w[:-1]
        self.encoders = nn.ModuleList(ResConvBlock(i, o, p, s) for i, o in zip(ins, w))
        self.pool = nn.MaxPool3d(2)
        self.bottleneck = ResConvBlock(w[-1], cfg.bottleneck_channels, p, s)

        ups = (cfg.bottleneck_channels,) + tuple(reversed(w))
        self.upsamples = nn.ModuleList(
            nn.ConvTranspose3d(ups[k], ups[k + 1], 2, stride=2) for k in range(NUM_LEVELS)
        )
        self.decoders = nn.ModuleList(
            ResConvBlock(2 * ups[k + 1], ups[k + 1], p, s) for k in range(NUM_LEVELS)
        )
        self.seg_head = nn.Conv3d(w[0], cfg.num_classes, 1)
        self.attention_gate = SegAttentionGate(w[0], cfg.gate_hidden, cfg.num_subregions, s)

    @staticmethod
    def check_input_shape(shape: Sequence[int]) -> None:
        bad = [n for n in shape if n % (2**NUM_LEVELS)]
        if bad:
            raise ValueError(
                f"spatial dims {tuple(shape)} must be divisible by {2**NUM_LEVELS}"
            )

    def forward_features(self, x):
        self.check_input_shape(x.shape[2:])
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.upsamples, self.decoders, reversed(skips)):
            x = dec(torch.cat([up(x), skip], dim=1))
        return x

    def forward(self, x) -> NetworkOutput:
        d1 = self.forward_features(x)
        return NetworkOutput(self.seg_head(d1), self.attention_gate(d1))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def initialize_weights(net: nn.Module, seed: int = 42) -> nn.Module:
    """Kaiming-normal conv kernels (fan-in, leaky-ReLU gain), zero biases,
    unit/zero norm affines. Deterministic in ``seed``.

    The attention gate's output conv starts at zero, so attention logits are
    0 (probability 0.5) until the attention loss moves them; with the
    attention weight at 0 the maps stay at chance.
    """
    gen = torch.Generator().manual_seed(seed)
    slope = getattr(getattr(net, "config", None), "leaky_slope", 0.01)
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d)):
                nn.init.kaiming_normal_(
                    m.weight, a=slope, mode="fan_in", nonlinearity="leaky_relu", generator=gen
                )
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.InstanceNorm3d) and m.affine:
                m.weight.fill_(1.0)
                m.bias.zero_()
        gate = getattr(net, "attention_gate", None)
        if gate is not None:
            gate.conv1.weight.zero_()
            gate.conv1.bias.zero_()
    return net


def build_network(config: Optional[NetworkConfig] = None, seed: int = 42) -> SegGuidedNet:
    return initialize_weights(SegGuidedNet(config), seed)


# ------------------------------------------------------------ checkpoints


def save_checkpoint(path: Union[str, Path], net: SegGuidedNet, *, seed: int, epoch: int, **extra) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "network_config": net.config.to_dict(),
        "state_dict": net.state_dict(),
        "seed": seed,
        "epoch": epoch,
    }
    payload.update(extra)
    torch.save(payload, path)


def load_checkpoint(
    path: Union[str, Path], expected_config: Optional[NetworkConfig] = None
) -> Tuple[SegGuidedNet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    config = NetworkConfig.from_dict(payload["network_config"])
    if expected_config is not None and expected_config != config:
        raise ValueError(
            f"{path}: checkpoint network config {config} does not match expected {expected_config}"
        )
    net = SegGuidedNet(config)
    net.load_state_dict(payload["state_dict"])
    meta = {k: v for k, v in payload.items() if k != "state_dict"}
    return net, meta

