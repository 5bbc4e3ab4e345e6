"""Learnable three-way feature blending.

One scalar mixing weight gamma controls the convex combination
F = (1-gamma)/2 * f1 + gamma * f2 + (1-gamma)/2 * f3; leave-one-out
variants renormalize the surviving coefficients so the reduced blend
stays on the same scale as the full one.
"""

from __future__ import annotations

import torch
import torch.nn as nn

GAMMA_EPS = 1e-3
GAMMA_INIT = 1.0 / 3.0


def _check_shapes(f1, f2, f3):
    if f1.shape != f2.shape or f1.shape != f3.shape:
        raise ValueError(f"feature shapes differ: {tuple(f1.shape)}, "
                         f"{tuple(f2.shape)}, {tuple(f3.shape)}")


def fusion_coefficients(gamma):
    """Full-blend coefficients ((1-g)/2, g, (1-g)/2); they sum to 1."""
    return (1.0 - gamma) / 2.0, gamma, (1.0 - gamma) / 2.0


def fuse(f1, f2, f3, gamma):
    _check_shapes(f1, f2, f3)
    c1, c2, c3 = fusion_coefficients(gamma)
    return c1 * f1 + c2 * f2 + c3 * f3


def fuse_leave_one_out(f1, f2, f3, drop_index: int, gamma):
    """Blend of the two surviving features, coefficients renormalized.

    Dropping the middle feature leaves two equal coefficients, so the
    result is the plain average of f1 and f3 for every gamma.
    """
    _check_shapes(f1, f2, f3)
    if drop_index == 1:
        denom = (1.0 + gamma) / 2.0
        return (gamma * f2 + (1.0 - gamma) / 2.0 * f3) / denom
    if drop_index == 2:
        return 0.5 * f1 + 0.5 * f3
    if drop_index == 3:
        denom = (1.0 + gamma) / 2.0
        return ((1.0 - gamma) / 2.0 * f1 + gamma * f2) / denom
    raise ValueError(f"drop_index must be 1, 2 or 3, got {drop_index!r}")


class FusionLayer(nn.Module):
    """Holds the learnable gamma, kept inside [GAMMA_EPS, 1-GAMMA_EPS] so
    every branch keeps receiving gradient."""

    def __init__(self, gamma_init: float = GAMMA_INIT):
        super().__init__()
        self.gamma_raw = nn.Parameter(torch.tensor(float(gamma_init)))

    @property
    def gamma(self) -> torch.Tensor:
        return self.gamma_raw.clamp(GAMMA_EPS, 1.0 - GAMMA_EPS)

    def project_(self) -> None:
        """Clamp the raw parameter in place (call after optimizer steps)."""
        with torch.no_grad():
            self.gamma_raw.clamp_(GAMMA_EPS, 1.0 - GAMMA_EPS)

    def forward(self, f1, f2, f3):
        return fuse(f1, f2, f3, self.gamma)

    def leave_one_out(self, f1, f2, f3, drop_index: int):
        return fuse_leave_one_out(f1, f2, f3, drop_index, self.gamma)
