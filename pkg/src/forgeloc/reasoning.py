"""Feature reasoning path: mask point-noise, the mask-space encoder, the
feature refiner, and the shared per-pixel predictor head.

The predictor head is deliberately a single module instance: the main
prediction (from the refined feature) and the auxiliary mask prediction
(from the encoded noisy mask) must come from the same parameters.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbones import NonFiniteInputError, _norm, _require_finite


def inject_mask_noise(mask: np.ndarray, gamma: float, seed: int,
                      within_mask_only: bool = False) -> np.ndarray:
    """Flip exactly floor(gamma * H * W) distinct mask positions.

    Positions are drawn uniformly without replacement over the whole grid
    (or over the tampered region only, if requested, capped at its size).
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("noise fraction must be in [0,1]")
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError("mask must be 2-D")
    h, w = mask.shape
    n_flip = math.floor(gamma * h * w)
    out = (mask > 0).astype(np.uint8)
    if n_flip == 0:
        return out
    rng = np.random.default_rng(seed)
    if within_mask_only:
        candidates = np.flatnonzero(out)
        n_flip = min(n_flip, candidates.size)
        if n_flip == 0:
            return out
        picks = rng.choice(candidates, size=n_flip, replace=False)
    else:
        picks = rng.choice(h * w, size=n_flip, replace=False)
    flat = out.reshape(-1)
    flat[picks] = 1 - flat[picks]
    return flat.reshape(h, w)


class MaskEncoder(nn.Module):
    """Projects a {0,1} mask into the feature space (same C, H, W as Z)."""

    def __init__(self, channels: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(1, channels, 3, padding=1),
            _norm(channels), nn.SiLU(),
            nn.Conv2d(channels, channels, 3, padding=1),
            _norm(channels), nn.SiLU(),
            nn.Conv2d(channels, channels, 3, padding=1),
        )

    def forward(self, mask: torch.Tensor) -> torch.Tensor:
        if mask.dim() == 3:                    # (B, H, W) -> (B, 1, H, W)
            mask = mask.unsqueeze(1)
        _require_finite(mask, "mask encoder")
        return self.net(mask)


class _ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm = _norm(out_ch)

    def forward(self, x):
        return F.silu(self.norm(self.conv(x)))


class ReasoningNet(nn.Module):
    """Small encoder-decoder refiner with one skip connection.

    depth=0 is an exact passthrough, used to isolate downstream pieces in
    tests; depth=1 is the working configuration.
    """

    def __init__(self, channels: int, depth: int = 1):
        super().__init__()
        if depth not in (0, 1):
            raise ValueError("reasoning depth must be 0 or 1")
        self.depth = depth
        if depth == 1:
            self.enc = _ConvBlock(channels, channels)
            self.down = nn.Conv2d(channels, channels, 3, stride=2, padding=1)
            self.mid = _ConvBlock(channels, channels)
            self.up = nn.Conv2d(channels, channels, 3, padding=1)
            self.merge = _ConvBlock(2 * channels, channels)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        _require_finite(feat, "reasoning network")
        if self.depth == 0:
            return feat
        skip = self.enc(feat)
        x = self.mid(F.silu(self.down(skip)))
        x = self.up(F.interpolate(x, size=skip.shape[-2:], mode="nearest"))
        return self.merge(torch.cat([x, skip], dim=1))


class PredictorHead(nn.Module):
    """Maps feature space to per-pixel tamper probability in (0,1)."""

    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 1),
            nn.SiLU(),
        )
        self.out = nn.Conv2d(channels, 1, 1)

    def logits(self, z: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(z).all():
            raise NonFiniteInputError("non-finite input to predictor head")
        return self.out(self.body(z))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(z))
