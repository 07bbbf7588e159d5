"""
Joint cost for the combined classifier/ellipse network:

    J = max(l1, 1 - p) * FL(p, p') + p * (l2 * sqrt(((x - x')/R1)^2 + ((y - y')/R2)^2) + l3 * R1 * R2)

FL is the alpha-balanced focal loss with alpha on true tracks. Ghosts
(p = 0) get no regression term; true tracks (p = 1) have their
classification term scaled by l1. Terms for an absent head are omitted.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from catch_prolong.nn.kernel import sigmoid, softplus

REDUCTIONS = ("mean", "sum")


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 0.5
    lambda2: float = 0.35
    lambda3: float = 0.15
    alpha: float = 0.95
    gamma: float = 2.0
    prob_clamp: float = 1e-7
    sqrt_eps: float = 1e-12
    reduction: str = "mean"

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights lambda1..3 must be non-negative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")
        if not 0.0 < self.prob_clamp < 0.5:
            raise ValueError(f"prob_clamp must lie in (0, 0.5), got {self.prob_clamp}")
        if not self.sqrt_eps > 0:
            raise ValueError(f"sqrt_eps must be positive, got {self.sqrt_eps}")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"reduction must be one of {REDUCTIONS}, got {self.reduction!r}")


@dataclass
class LossSample:
    """
    One supervised output: label p, predicted probability, predicted
    ellipse (cx, cy, R1, R2) in cm and the true next point (x, y).
    """
    label: int
    prob: Optional[float] = None
    ellipse: Optional[Tuple[float, float, float, float]] = None
    target: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if self.prob is None and self.ellipse is None:
            raise ValueError("a loss sample needs a probability, an ellipse, or both")
        if self.ellipse is not None:
            if self.ellipse[2] <= 0 or self.ellipse[3] <= 0:
                raise ValueError("ellipse semiaxes must be positive")
            if self.label == 1 and self.target is None:
                raise ValueError("a true-track sample with an ellipse needs the true next point")


# -- Focal loss -------------------------------------------------------------------------

def _focal(p, q, alpha, gamma):
    """Focal loss and its derivative in q, for q already clamped to (0, 1)."""
    log_q = np.log(q)
    log_1q = np.log1p(-q)
    pos = -alpha * np.power(1.0 - q, gamma) * log_q
    neg = -(1.0 - alpha) * np.power(q, gamma) * log_1q
    d_pos = alpha * (gamma * np.power(1.0 - q, gamma - 1.0) * log_q - np.power(1.0 - q, gamma) / q)
    d_neg = (1.0 - alpha) * (np.power(q, gamma) / (1.0 - q) - gamma * np.power(q, gamma - 1.0) * log_1q)
    return p * pos + (1.0 - p) * neg, p * d_pos + (1.0 - p) * d_neg


def focal_loss(p, p_hat, alpha: float = 0.95, gamma: float = 2.0, prob_clamp: float = 1e-7):
    """
    Balanced focal loss:
        p = 1: -alpha * (1 - p')^gamma * ln(p')
        p = 0: -(1 - alpha) * p'^gamma * ln(1 - p')
    with p' clamped into [prob_clamp, 1 - prob_clamp].
    """
    q = np.clip(np.asarray(p_hat, dtype=np.float64), prob_clamp, 1.0 - prob_clamp)
    value, _ = _focal(np.asarray(p, dtype=np.float64), q, alpha, gamma)
    return float(value) if np.ndim(value) == 0 else value


def classification_gate(p, lambda1: float):
    return np.maximum(lambda1, 1.0 - np.asarray(p, dtype=np.float64))


# -- Batched heads ------------------------------------------------------------------------

@dataclass
class HeadBatch:
    """
    Head pre-activations for a batch. `center` is already in cm; the
    semiaxes are semi_scale * softplus(semi_pre). Absent heads are None.
    """
    logits: Optional[np.ndarray] = None
    center: Optional[np.ndarray] = None
    semi_pre: Optional[np.ndarray] = None
    semi_scale: Tuple[float, float] = (1.0, 1.0)

    @property
    def prob(self) -> Optional[np.ndarray]:
        return None if self.logits is None else sigmoid(self.logits)

    @property
    def semiaxes(self) -> Optional[np.ndarray]:
        if self.semi_pre is None:
            return None
        return np.asarray(self.semi_scale) * softplus(self.semi_pre)


@dataclass
class HeadGrads:
    """d J / d pre-activation, per sample, for every present head."""
    logits: Optional[np.ndarray] = None
    center: Optional[np.ndarray] = None
    semi_pre: Optional[np.ndarray] = None


def joint_loss_batch(heads: HeadBatch, labels: np.ndarray, targets: Optional[np.ndarray],
                     cfg: LossConfig, regress: Optional[np.ndarray] = None,
                     with_grad: bool = False):
    """
    Per-sample joint cost J for a batch.

    Args:
        heads: network head outputs (pre-activation).
        labels: (B,) 0/1 labels.
        targets: (B, 2) true next points in cm; rows may be NaN where the
            regression term is inactive.
        cfg: loss weights and constants.
        regress: optional (B,) mask of samples that carry a regression
            target; defaults to every true-track sample.
        with_grad: also return HeadGrads of each sample's J.

    Returns:
        (B,) array of J, or (J, HeadGrads) when with_grad.
    """
    labels = np.asarray(labels, dtype=np.float64)
    batch = len(labels)
    total = np.zeros(batch)
    grads = HeadGrads()

    if heads.logits is not None:
        prob = sigmoid(heads.logits)
        q = np.clip(prob, cfg.prob_clamp, 1.0 - cfg.prob_clamp)
        in_range = (prob > cfg.prob_clamp) & (prob < 1.0 - cfg.prob_clamp)
        fl, dfl = _focal(labels, q, cfg.alpha, cfg.gamma)
        gate = classification_gate(labels, cfg.lambda1)
        total = total + gate * fl
        grads.logits = np.where(in_range, gate * dfl * prob * (1.0 - prob), 0.0)

    if heads.center is not None:
        active = labels == 1.0
        if regress is not None:
            active = active & np.asarray(regress, dtype=bool)
        center = heads.center
        semi = heads.semiaxes
        truth = center if targets is None else np.where(active[:, None], targets, center)

        d = truth - center
        ratio = d / semi
        dist = np.sqrt(ratio[:, 0] ** 2 + ratio[:, 1] ** 2 + cfg.sqrt_eps)
        area = semi[:, 0] * semi[:, 1]
        total = total + np.where(active, cfg.lambda2 * dist + cfg.lambda3 * area, 0.0)

        weight = np.where(active, 1.0, 0.0)[:, None]
        d_center = weight * cfg.lambda2 * (-(d / semi ** 2) / dist[:, None])
        d_semi = -(d ** 2 / semi ** 3) / dist[:, None]
        d_semi = weight * (cfg.lambda2 * d_semi + cfg.lambda3 * semi[:, ::-1])
        grads.center = d_center
        grads.semi_pre = d_semi * np.asarray(heads.semi_scale) * sigmoid(heads.semi_pre)

    return (total, grads) if with_grad else total


def reduce_loss(values: np.ndarray, cfg: LossConfig) -> float:
    """Batch reduction: arithmetic mean (default) or sum."""
    if len(values) == 0:
        return 0.0
    return float(np.sum(values) if cfg.reduction == "sum" else np.mean(values))


# -- Single sample ------------------------------------------------------------------------

def joint_loss(sample: LossSample, cfg: LossConfig) -> float:
    """J for one sample, from post-activation predictions."""
    value = 0.0
    if sample.prob is not None:
        fl = focal_loss(sample.label, sample.prob, cfg.alpha, cfg.gamma, cfg.prob_clamp)
        value += float(classification_gate(sample.label, cfg.lambda1)) * fl
    if sample.ellipse is not None and sample.label == 1:
        cx, cy, r1, r2 = sample.ellipse
        x, y = sample.target
        dist = np.sqrt(((x - cx) / r1) ** 2 + ((y - cy) / r2) ** 2 + cfg.sqrt_eps)
        value += cfg.lambda2 * float(dist) + cfg.lambda3 * r1 * r2
    return value


def joint_loss_grad(label: int, cfg: LossConfig, logit: Optional[float] = None,
                    center: Optional[Tuple[float, float]] = None,
                    semi_pre: Optional[Tuple[float, float]] = None,
                    target: Optional[Tuple[float, float]] = None,
                    semi_scale: Tuple[float, float] = (1.0, 1.0)) -> HeadGrads:
    """
    Exact gradient of one sample's J with respect to the head
    pre-activations: the probability logit, the center coordinates and the
    semiaxis pre-activations (semiaxis = semi_scale * softplus(pre)).
    """
    if logit is None and center is None:
        raise ValueError("joint_loss_grad needs at least one head")
    if center is not None and label == 1 and target is None:
        raise ValueError("a true-track sample with an ellipse needs the true next point")
    heads = HeadBatch(
        logits=None if logit is None else np.array([logit], dtype=np.float64),
        center=None if center is None else np.array([center], dtype=np.float64),
        semi_pre=None if center is None else np.array([semi_pre], dtype=np.float64),
        semi_scale=semi_scale,
    )
    targets = None if target is None else np.array([target], dtype=np.float64)
    _, grads = joint_loss_batch(heads, np.array([label]), targets, cfg, with_grad=True)
    return HeadGrads(
        logits=None if grads.logits is None else grads.logits[0],
        center=None if grads.center is None else grads.center[0],
        semi_pre=None if grads.semi_pre is None else grads.semi_pre[0],
    )
