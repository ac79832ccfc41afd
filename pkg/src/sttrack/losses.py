"""Training objectives: weighted L1 + GIoU for boxes, binary cross-entropy for the score."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine.tensor import Tensor, absolute, clamp_min, maximum, mean, minimum, softplus

DENOM_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    giou: float = 2.0
    l1: float = 5.0

    def __post_init__(self):
        if self.giou < 0 or self.l1 < 0:
            raise ValueError("loss weights must be nonnegative")


def giou_tensor(pred: Tensor, gt) -> Tensor:
    """Differentiable GIoU between (B, 4) corner boxes; returns (B,).

    Predicted extents are clamped at zero for the area, so an inverted box
    counts as empty rather than negative; a tiny epsilon guards the two
    denominators.
    """
    gt = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt, dtype=pred.dtype))
    px0, py0, px1, py1 = (pred[:, i] for i in range(4))
    gx0, gy0, gx1, gy1 = (gt[:, i] for i in range(4))
    area_p = clamp_min(px1 - px0, 0.0) * clamp_min(py1 - py0, 0.0)
    area_g = (gx1 - gx0) * (gy1 - gy0)
    iw = clamp_min(minimum(px1, gx1) - maximum(px0, gx0), 0.0)
    ih = clamp_min(minimum(py1, gy1) - maximum(py0, gy0), 0.0)
    inter = iw * ih
    union = area_p + area_g - inter
    cw = maximum(px1, gx1) - minimum(px0, gx0)
    ch = maximum(py1, gy1) - minimum(py0, gy0)
    enclose = cw * ch
    return inter / (union + DENOM_EPS) - (enclose - union) / (enclose + DENOM_EPS)


def localization_loss(pred: Tensor, gt, weights: LossWeights = LossWeights()) -> tuple[Tensor, Tensor, Tensor]:
    """Weighted (1 - GIoU) + L1 on normalized corner boxes.

    Returns ``(total, giou_term, l1_term)`` where the terms are the unweighted
    batch means; L1 averages over the four coordinates.
    """
    gt = Tensor(np.asarray(gt, dtype=pred.dtype))
    giou_term = mean(1.0 - giou_tensor(pred, gt))
    l1_term = mean(absolute(pred - gt))
    total = giou_term * weights.giou + l1_term * weights.l1
    return total, giou_term, l1_term


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean of -[y log p + (1 - y) log(1 - p)] with p = sigmoid(logit)."""
    y = Tensor(np.asarray(labels, dtype=logits.dtype))
    return mean(softplus(logits) - y * logits)
