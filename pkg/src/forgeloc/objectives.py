"""Training objectives.

Four terms enter the composite loss:

  loc  - per-pixel binary cross-entropy of the main prediction
  su   - mean over branches of exp(-KL[full prediction || leave-one-out
         prediction]); bounded in (0,1], shrinks only when dropping a
         branch visibly changes the predicted distribution
  mi   - KL between the channel-softmax distributions of the refined
         feature and the encoded mask (or half mean squared distance in
         the diagonal-Gaussian mode)
  aux  - binary cross-entropy of the auxiliary mask prediction

All probabilities are clamped to [eps, 1-eps] before any logarithm so
loss values are reproducible bit for bit at a fixed precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

PROB_EPS = 1e-6
DEFAULT_LAMBDAS = (0.1, 1.0, 0.1)


def clamp_probs(p: torch.Tensor, eps: float = PROB_EPS) -> torch.Tensor:
    return p.clamp(eps, 1.0 - eps)


def _scalar(v) -> float:
    return float(v.detach()) if torch.is_tensor(v) else float(v)


def bernoulli_kl(p: torch.Tensor, q: torch.Tensor,
                 eps: float = PROB_EPS) -> torch.Tensor:
    """Elementwise KL between Bernoulli(p) and Bernoulli(q)."""
    p = clamp_probs(p, eps)
    q = clamp_probs(q, eps)
    return p * torch.log(p / q) + (1 - p) * torch.log((1 - p) / (1 - q))


def sufficiency_loss(p_full: torch.Tensor, p_loo, eps: float = PROB_EPS,
                     aggregate: str = "mean",
                     detach_loo: bool = False) -> torch.Tensor:
    """Mean over branches of exp(-KL[p_full || p_loo_i]), KL averaged over
    pixels. Equals 1 when no branch changes the prediction; decreases as
    any branch's marginal contribution grows."""
    terms = []
    for q in p_loo:
        if q.shape != p_full.shape:
            raise ValueError(f"leave-one-out map shape {tuple(q.shape)} != "
                             f"full map shape {tuple(p_full.shape)}")
        if detach_loo:
            q = q.detach()
        # KL is non-negative; the clamp only strips float rounding debris so
        # the exp stays within (0,1]
        kl = bernoulli_kl(p_full, q, eps).mean().clamp_min(0.0)
        terms.append(torch.exp(-kl))
    stacked = torch.stack(terms)
    if aggregate == "mean":
        return stacked.mean()
    if aggregate == "max":
        return stacked.max()
    raise ValueError(f"unknown aggregate {aggregate!r}")


def minimality_loss(z: torch.Tensor, e: torch.Tensor,
                    mode: str = "categorical",
                    eps: float = PROB_EPS) -> torch.Tensor:
    """Agreement penalty between the feature path and the mask path.

    categorical: softmax both inputs over channels, KL(feature || mask)
    per position, spatial mean. gaussian: half mean squared distance
    (diagonal unit-variance Gaussian KL).
    """
    if z.shape != e.shape:
        raise ValueError(f"shape mismatch: {tuple(z.shape)} vs {tuple(e.shape)}")
    if mode == "gaussian":
        return 0.5 * (z - e).pow(2).mean()
    if mode != "categorical":
        raise ValueError(f"unknown minimality mode {mode!r}")
    if z.dim() == 3:
        cdim = 0
    elif z.dim() == 4:
        cdim = 1
    else:
        raise ValueError("expected (C,H,W) or (B,C,H,W) features")
    logp = torch.log_softmax(z, dim=cdim)
    logq = torch.log_softmax(e, dim=cdim)
    kl = (logp.exp() * (logp - logq)).sum(dim=cdim)
    return kl.mean().clamp_min(0.0)


def localization_loss(pred: torch.Tensor, mask: torch.Tensor,
                      eps: float = PROB_EPS) -> torch.Tensor:
    """Mean per-pixel binary cross-entropy against a {0,1} mask."""
    if pred.shape != mask.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs "
                         f"{tuple(mask.shape)}")
    p = clamp_probs(pred, eps)
    m = mask.to(p.dtype)
    return -(m * torch.log(p) + (1 - m) * torch.log(1 - p)).mean()


def auxiliary_loss(aux_pred: torch.Tensor, mask: torch.Tensor,
                   eps: float = PROB_EPS) -> torch.Tensor:
    """Cross-entropy of the mask-branch prediction against the clean mask."""
    return localization_loss(aux_pred, mask, eps)


@dataclass
class LossBundle:
    """The four components plus their weights; values may be tensors
    (training) or plain floats (logging/aggregation)."""

    loc: object
    su: object
    mi: object
    aux: object
    lambdas: tuple = DEFAULT_LAMBDAS

    def to_record(self) -> dict:
        rec = {k: _scalar(getattr(self, k)) for k in ("loc", "su", "mi", "aux")}
        rec["total"] = _scalar(total_loss(self))
        return rec


def total_loss(bundle: LossBundle):
    """loc + l1*su + l2*mi + l3*aux; a zero lambda removes that term (and
    its gradient) entirely."""
    l1, l2, l3 = bundle.lambdas
    return bundle.loc + l1 * bundle.su + l2 * bundle.mi + l3 * bundle.aux
