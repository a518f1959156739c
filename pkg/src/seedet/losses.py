"""Detection loss: focal classification plus smooth-L1 box regression.

Scalar reference implementations (plain floats, no autodiff) live alongside
the graph-building versions so tests can pin one against the other. The
focal term with alpha=1, gamma=0 reduces exactly to binary cross-entropy,
which is what the no-focal ablation trains with.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

PROB_EPS = 1e-7  # probability clamp before the log

# A patch with no positive anchors still has to learn background somewhere:
# plain-CE training samples negatives at 3:1 against positives but never
# fewer than this many.
MIN_SAMPLED_NEGATIVES = 32
NEGATIVES_PER_POSITIVE = 3


def focal_loss_scalar(p: float, y: int, alpha: float = 0.5, gamma: float = 2.0) -> float:
    """Focal term for one anchor: -alpha * (1 - p_t)^gamma * log(p_t)."""
    p = min(max(p, PROB_EPS), 1.0 - PROB_EPS)
    pt = p if y == 1 else 1.0 - p
    return -alpha * (1.0 - pt) ** gamma * np.log(pt)


def cross_entropy_scalar(p: float, y: int) -> float:
    p = min(max(p, PROB_EPS), 1.0 - PROB_EPS)
    return -np.log(p if y == 1 else 1.0 - p)


def smooth_l1_scalar(x: float) -> float:
    ax = abs(x)
    return 0.5 * x * x if ax < 1.0 else ax - 0.5


@dataclass(frozen=True)
class LossParams:
    alpha: float = 0.5
    gamma: float = 2.0
    plain_ce: bool = False  # no-focal ablation: alpha=1, gamma=0, sampled negatives

    def effective(self) -> tuple[float, float]:
        return (1.0, 0.0) if self.plain_ce else (self.alpha, self.gamma)


@dataclass
class LossBreakdown:
    total: float
    cls: float
    reg: float
    n_pos: int
    n_neg: int
    n_ignored: int


def classification_weights(
    labels: np.ndarray, params: LossParams, rng: Optional[np.random.Generator]
) -> np.ndarray:
    """Per-anchor weight mask for the classification term.

    labels: int array, 1 positive / 0 negative / -1 ignored. Focal training
    uses every positive and negative. Plain-CE training subsamples
    negatives (that is the class-imbalance handling focal loss replaces).
    """
    weights = (labels >= 0).astype(np.float64)
    if params.plain_ce:
        neg_idx = np.flatnonzero(labels.reshape(-1) == 0)
        n_pos = int((labels == 1).sum())
        cap = max(NEGATIVES_PER_POSITIVE * n_pos, MIN_SAMPLED_NEGATIVES)
        if neg_idx.size > cap:
            if rng is None:
                raise ValueError("plain-CE negative sampling needs an rng")
            keep = rng.choice(neg_idx.size, size=cap, replace=False)
            flat = weights.reshape(-1)
            flat[neg_idx] = 0.0
            flat[neg_idx[keep]] = 1.0
    return weights


def detection_loss(
    prob: Tensor,
    deltas: Tensor,
    labels: np.ndarray,
    targets: np.ndarray,
    params: LossParams = LossParams(),
    cls_weights: Optional[np.ndarray] = None,
) -> tuple[Tensor, LossBreakdown]:
    """Build the combined loss graph.

    prob:    [N, A, Z, Y, X] sigmoid probabilities.
    deltas:  [N, A, 4, Z, Y, X] raw box offsets.
    labels:  [N, A, Z, Y, X] ints, 1 positive / 0 negative / -1 ignored.
    targets: [N, A, 4, Z, Y, X] encoded offsets, only read at positives.
    cls_weights: optional mask matching labels; defaults to all non-ignored.

    The focal classification term sums over every covered anchor and
    divides by the positive count (or 1 with no positives): under extreme
    imbalance the per-anchor mean would shrink the per-positive gradient
    with the anchor count and the classifier would never train, so the
    normalization follows the convention focal loss was designed with.
    Plain-CE mode divides by the covered-anchor count instead, matching
    how its 3:1 negative sampling is meant to be used. The regression
    term averages over positive anchors (each contributing the sum of its
    four smooth-L1 components); total = cls + reg. With no positives the
    regression term is absent.
    """
    if prob.data.shape != labels.shape:
        raise ValueError(f"prob shape {prob.data.shape} != labels shape {labels.shape}")
    if deltas.data.shape != targets.shape:
        raise ValueError(f"deltas shape {deltas.data.shape} != targets shape {targets.shape}")
    alpha, gamma = params.effective()
    if cls_weights is None:
        cls_weights = (labels >= 0).astype(np.float64)
    n_covered = float(cls_weights.sum())
    if n_covered < 1:
        raise ValueError("classification term covers no anchors")

    pos = np.argwhere(labels == 1)
    n_pos = pos.shape[0]

    y = (labels == 1).astype(prob.data.dtype)
    p = T.clip(prob, PROB_EPS, 1.0 - PROB_EPS)
    # p_t = p where y=1, 1-p where y=0; ignored anchors are masked out below
    pt = p * y + (1.0 - p) * (1.0 - y)
    focal = T.mul(T.power(1.0 - pt, gamma) * T.tlog(pt), -alpha)
    w = cls_weights.astype(prob.data.dtype)
    cls_norm = n_covered if params.plain_ce else float(max(n_pos, 1))
    cls_term = T.tsum(focal * w) / cls_norm
    if n_pos > 0:
        ni, ai, zi, yi, xi = (pos[:, j] for j in range(5))
        pred = deltas[ni, ai, :, zi, yi, xi]  # [n_pos, 4]
        tgt = targets[ni, ai, :, zi, yi, xi]
        reg_term = T.tsum(T.smooth_l1(pred - tgt)) / n_pos
        total = cls_term + reg_term
        reg_val = float(reg_term.data)
    else:
        total = cls_term
        reg_val = 0.0

    breakdown = LossBreakdown(
        total=float(total.data),
        cls=float(cls_term.data),
        reg=reg_val,
        n_pos=int(n_pos),
        n_neg=int(((labels == 0) * (cls_weights > 0)).sum()),
        n_ignored=int((labels == -1).sum()),
    )
    return total, breakdown
