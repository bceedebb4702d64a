"""Training objectives on per-class sigmoid probabilities.

All inputs are probabilities, not logits; log terms clamp to
``[EPS, 1 - EPS]``.  Batched inputs are ``(B, K)`` and reduce by the mean over
the batch; a bare ``(K,)`` vector is treated as a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

EPS = 1e-7


@dataclass(frozen=True)
class FocalParams:
    class_weights: torch.Tensor
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _as_batch(t: torch.Tensor) -> torch.Tensor:
    return t.unsqueeze(0) if t.dim() == 1 else t


def weighted_focal_loss(probs: torch.Tensor, target: torch.Tensor, params: FocalParams) -> torch.Tensor:
    """Class-frequency weighted focal loss summed over classes."""
    _check_same_shape(probs, target, "weighted_focal_loss")
    probs, target = _as_batch(probs), _as_batch(target).to(probs.dtype)
    weights = torch.as_tensor(params.class_weights, dtype=probs.dtype, device=probs.device)
    if weights.shape != (probs.shape[-1],):
        raise ValueError(
            f"weighted_focal_loss: {weights.shape[0] if weights.dim() else 0} class weights "
            f"for {probs.shape[-1]} classes"
        )
    p = probs.clamp(EPS, 1 - EPS)
    a, g = params.alpha, params.gamma
    pos = a * target * (1 - p) ** g * torch.log(p)
    neg = (1 - a) * (1 - target) * p**g * torch.log(1 - p)
    return -(weights * (pos + neg)).sum(dim=-1).mean()


def discrepancy_loss(p1: torch.Tensor, p2: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between two classifiers' probabilities."""
    _check_same_shape(p1, p2, "discrepancy_loss")
    return (p1 - p2).abs().mean()


def bce_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy averaged over classes; soft targets allowed."""
    _check_same_shape(pred, target, "bce_loss")
    pred, target = _as_batch(pred), _as_batch(target).to(pred.dtype)
    p = pred.clamp(EPS, 1 - EPS)
    per_class = target * torch.log(p) + (1 - target) * torch.log(1 - p)
    return -per_class.mean(dim=-1).mean()


def mutual_bce(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``bce(a, b) + bce(b, a)`` with each target held constant.

    Both arguments receive gradient, each pulled toward the other's current
    value; the gradient vanishes where ``a == b``.
    """
    return bce_loss(a, b.detach()) + bce_loss(b, a.detach())
