"""Four-term segmentation objective: weighted focal + dice + MAE + cross-entropy.

All terms consume per-pixel class probabilities against one-hot targets.
Default weights are 20:1:1:1 (focal dominating). Probabilities are clamped
at 1e-8 before logs so degenerate masks never produce NaN; soft dice uses a
1e-6 smoothing constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigurationError, DimensionError, ValidationError

EPS_PROB = 1e-8
EPS_SMOOTH = 1e-6


@dataclass(frozen=True)
class LossWeights:
    """Term weights; defaults follow the 20:1:1:1 convention."""

    focal: float = 20.0
    dice: float = 1.0
    mae: float = 1.0
    ce: float = 1.0

    def __post_init__(self):
        for name in ("focal", "dice", "mae", "ce"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"loss weight {name} must be nonnegative, got {getattr(self, name)}")


class PredictionTargetPair:
    """Per-pixel class probabilities (batch, classes, H, W) with a one-hot target of the same shape."""

    def __init__(self, probs: torch.Tensor, target: torch.Tensor, validate: bool = True):
        if probs.dim() != 4 or target.dim() != 4:
            raise DimensionError(
                f"probs and target must be rank 4, got {tuple(probs.shape)} and {tuple(target.shape)}"
            )
        if probs.shape != target.shape:
            raise DimensionError(
                f"probs shape {tuple(probs.shape)} does not match target shape {tuple(target.shape)}"
            )
        if validate:
            p = probs.detach()
            t = target.detach()
            if not torch.isfinite(p).all():
                raise ValidationError("probs contain non-finite entries")
            if p.min().item() < -1e-6 or p.max().item() > 1.0 + 1e-6:
                raise ValidationError("probs must lie in [0, 1]")
            sums = p.sum(dim=1)
            if (sums - 1.0).abs().max().item() > 1e-6:
                raise ValidationError("per-pixel class probabilities must sum to 1 within 1e-6")
            if not torch.logical_or(t == 0, t == 1).all():
                raise ValidationError("target entries must be exactly 0 or 1")
            if (t.sum(dim=1) != 1).any():
                raise ValidationError("target must be one-hot: exactly one 1 per pixel")
        self.probs = probs
        self.target = target

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1]


def _true_class_prob(pair: PredictionTargetPair) -> torch.Tensor:
    """Probability assigned to the true class, clamped to [EPS_PROB, 1]."""
    p_t = (pair.probs * pair.target).sum(dim=1)
    return p_t.clamp(min=EPS_PROB, max=1.0)


def focal_loss(pair: PredictionTargetPair, gamma: float = 2.0) -> torch.Tensor:
    """Mean over pixels of -(1 - p_t)^gamma * log(p_t)."""
    if gamma < 0:
        raise ConfigurationError(f"gamma must be nonnegative, got {gamma}")
    p_t = _true_class_prob(pair)
    return (-((1.0 - p_t) ** gamma) * torch.log(p_t)).mean()


def ce_loss(pair: PredictionTargetPair) -> torch.Tensor:
    """Mean over pixels of -log(p_t)."""
    return (-torch.log(_true_class_prob(pair))).mean()


def mae_loss(pair: PredictionTargetPair) -> torch.Tensor:
    """Mean absolute difference over every (pixel, class) entry."""
    return (pair.probs - pair.target).abs().mean()


def dice_loss(pair: PredictionTargetPair) -> torch.Tensor:
    """Soft dice averaged over classes, pixels pooled over batch and space."""
    dims = (0, 2, 3)
    inter = (pair.probs * pair.target).sum(dim=dims)
    psum = pair.probs.sum(dim=dims)
    tsum = pair.target.sum(dim=dims)
    per_class = 1.0 - (2.0 * inter + EPS_SMOOTH) / (psum + tsum + EPS_SMOOTH)
    return per_class.mean()


@dataclass(frozen=True)
class LossBreakdown:
    """Unweighted term values plus the weighted total, as plain floats."""

    focal: float
    dice: float
    mae: float
    ce: float
    total: float


@dataclass
class CompositeLoss:
    """Weighted total as a tensor (for backprop) plus the float breakdown."""

    total: torch.Tensor
    breakdown: LossBreakdown


def composite_loss(
    pair: PredictionTargetPair, weights: LossWeights = LossWeights(), gamma: float = 2.0
) -> CompositeLoss:
    """lambda_focal*focal + lambda_dice*dice + lambda_mae*mae + lambda_ce*ce.

    The reported breakdown total is recomputed from the float terms with the
    same weighting expression, so the decomposition identity holds exactly.
    """
    focal_t = focal_loss(pair, gamma=gamma)
    dice_t = dice_loss(pair)
    mae_t = mae_loss(pair)
    ce_t = ce_loss(pair)
    total = weights.focal * focal_t + weights.dice * dice_t + weights.mae * mae_t + weights.ce * ce_t
    f, d, m, c = (float(x.detach()) for x in (focal_t, dice_t, mae_t, ce_t))
    breakdown = LossBreakdown(
        focal=f,
        dice=d,
        mae=m,
        ce=c,
        total=weights.focal * f + weights.dice * d + weights.mae * m + weights.ce * c,
    )
    return CompositeLoss(total=total, breakdown=breakdown)
