"""Attention U-Net feature extractors.

Three gate flavours scale the activations elementwise: a per-channel gate
driven by global average pooling, a per-position gate driven by channel
statistics, and a full-resolution per-channel-per-position gate computed
without any pooling. A backbone is a symmetric encoder-decoder built from
these blocks; its output keeps the input's spatial size.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

ATTENTION_KINDS = ("channel", "spatial", "pixel")


class NonFiniteInputError(RuntimeError):
    """An activation reaching a block contained NaN or Inf."""


class ConfigError(ValueError):
    pass


def _require_finite(x: torch.Tensor, where: str) -> None:
    if not torch.isfinite(x).all():
        raise NonFiniteInputError(f"non-finite activations entering {where}")


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(4 if channels % 4 == 0 else 1, channels)


class ChannelAttention(nn.Module):
    """Squeeze spatial dims by global average pooling, excite per channel."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.gate = nn.Sequential(
            nn.Conv2d(channels, hidden, 1),
            nn.SiLU(),
            nn.Conv2d(hidden, channels, 1),
        )

    def gate_map(self, x: torch.Tensor) -> torch.Tensor:
        squeezed = x.mean(dim=(2, 3), keepdim=True)
        return torch.sigmoid(self.gate(squeezed))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _require_finite(x, "channel attention")
        return x * self.gate_map(x)


class SpatialAttention(nn.Module):
    """Channelwise average+max statistics, one wide conv, per-position gate."""

    def __init__(self, channels: int, kernel: int = 7):
        super().__init__()
        self.gate = nn.Conv2d(2, 1, kernel, padding=kernel // 2,
                              padding_mode="reflect")

    def gate_map(self, x: torch.Tensor) -> torch.Tensor:
        avg = x.mean(dim=1, keepdim=True)
        mx = x.max(dim=1, keepdim=True).values
        return torch.sigmoid(self.gate(torch.cat([avg, mx], dim=1)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _require_finite(x, "spatial attention")
        return x * self.gate_map(x)


class PixelAttention(nn.Module):
    """Full-resolution gate from pointwise transforms; no pooling anywhere."""

    def __init__(self, channels: int):
        super().__init__()
        self.gate = nn.Sequential(
            nn.Conv2d(channels, channels, 1),
            nn.SiLU(),
            nn.Conv2d(channels, channels, 1),
        )

    def gate_map(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.gate(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _require_finite(x, "pixel attention")
        return x * self.gate_map(x)


_ATTENTION = {
    "channel": ChannelAttention,
    "spatial": SpatialAttention,
    "pixel": PixelAttention,
}


def make_attention(kind: str, channels: int) -> nn.Module:
    if kind not in _ATTENTION:
        raise ConfigError(f"unknown attention kind {kind!r}; "
                          f"expected one of {ATTENTION_KINDS}")
    return _ATTENTION[kind](channels)


class AttentionBlock(nn.Module):
    """3x3 conv + norm + SiLU, then the configured attention gate."""

    def __init__(self, in_ch: int, out_ch: int, kind: str):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm = _norm(out_ch)
        self.attn = make_attention(kind, out_ch)

    def forward(self, x):
        return self.attn(F.silu(self.norm(self.conv(x))))


@dataclass
class BackboneConfig:
    depth: int = 3
    blocks_per_scale: int = 1
    base_channels: int = 8
    attention_kind: str = "channel"
    in_channels: int = 3

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.blocks_per_scale < 1:
            raise ConfigError("blocks_per_scale must be >= 1")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be >= 1")
        if self.attention_kind not in ATTENTION_KINDS:
            raise ConfigError(f"unknown attention kind {self.attention_kind!r}")


def _stack(in_ch, out_ch, count, kind):
    blocks = [AttentionBlock(in_ch, out_ch, kind)]
    blocks += [AttentionBlock(out_ch, out_ch, kind) for _ in range(count - 1)]
    return nn.Sequential(*blocks)


class Downsample(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1)
        self.norm = _norm(out_ch)

    def forward(self, x):
        return F.silu(self.norm(self.conv(x)))


class Upsample(nn.Module):
    """Nearest-neighbour resize followed by a conv (no checkerboarding)."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm = _norm(out_ch)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return F.silu(self.norm(self.conv(x)))


class AttentionUNet(nn.Module):
    """Symmetric encoder-decoder with skip connections; all conv stages are
    attention blocks of one kind. Output: (B, base_channels, H, W)."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.base_channels * (2 ** lvl) for lvl in range(cfg.depth)]
        self.enc = nn.ModuleList()
        self.down = nn.ModuleList()
        in_ch = cfg.in_channels
        for lvl, width in enumerate(widths):
            self.enc.append(_stack(in_ch, width, cfg.blocks_per_scale,
                                   cfg.attention_kind))
            if lvl < cfg.depth - 1:
                self.down.append(Downsample(width, widths[lvl + 1]))
            in_ch = widths[lvl + 1] if lvl < cfg.depth - 1 else width
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for lvl in range(cfg.depth - 2, -1, -1):
            self.up.append(Upsample(widths[lvl + 1], widths[lvl]))
            self.dec.append(_stack(2 * widths[lvl], widths[lvl],
                                   cfg.blocks_per_scale, cfg.attention_kind))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4:
            raise ConfigError("expected a (B, C, H, W) input")
        h, w = x.shape[-2:]
        factor = 2 ** (self.cfg.depth - 1)
        if h % factor or w % factor:
            raise ConfigError(
                f"input {h}x{w} not divisible by 2^(depth-1)={factor}")
        skips = []
        for lvl, stage in enumerate(self.enc):
            x = stage(x)
            if lvl < self.cfg.depth - 1:
                skips.append(x)
                x = self.down[lvl](x)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            x = up(x)
            x = dec(torch.cat([x, skip], dim=1))
        return x
