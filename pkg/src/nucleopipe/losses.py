"""Per-head losses, their weighted total, and analytic gradients.

Gradients are taken with respect to the prediction values themselves (each
probability treated as an independent variable) and are meant for
verification against finite differences; there is no training loop here.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .maps import NUM_CLASSES, PathLike

EPS = 1e-6
PROB_FLOOR = 1e-7


def _pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    return pred, target


def _sums(pred, target) -> tuple[float, float, float]:
    p, t = _pair(pred, target)
    return float((p * t).sum()), float(p.sum()), float(t.sum())


def _dice(inter: float, sp: float, st: float) -> float:
    return 1.0 - (2.0 * inter + EPS) / (sp + st + EPS)


def _jaccard(inter: float, sp: float, st: float) -> float:
    return 1.0 - (inter + EPS) / (sp + st - inter + EPS)


def dice_loss(pred, target) -> float:
    """Soft Dice loss ``1 - (2 sum(pt) + eps) / (sum(p) + sum(t) + eps)``."""
    return _dice(*_sums(pred, target))


def jaccard_loss(pred, target) -> float:
    """Soft Jaccard loss ``1 - (sum(pt) + eps) / (sum(p) + sum(t) - sum(pt) + eps)``."""
    return _jaccard(*_sums(pred, target))


def combine(dice: float, jaccard: float) -> float:
    """``d * j / (d + j)``, defined as 0 at ``d = j = 0``."""
    total = dice + jaccard
    return 0.0 if total == 0 else dice * jaccard / total


def combined_seg_loss(pred, target) -> float:
    """Segmentation loss used for the semantic and edge heads."""
    sums = _sums(pred, target)
    return combine(_dice(*sums), _jaccard(*sums))


def _check_class_weights(class_weights, n_classes: int) -> np.ndarray:
    w = np.asarray(class_weights, dtype=np.float64)
    if w.shape != (n_classes,):
        raise ValueError(f"expected {n_classes} class weights, got shape {w.shape}")
    if (w < 0).any() or not np.isfinite(w).all():
        raise ValueError("class weights must be finite and non-negative")
    return w


def _cce_inputs(pred, target, class_weights):
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target)
    n_classes = p.shape[-1]
    if p.shape[:-1] != t.shape:
        raise ValueError(f"class probabilities {p.shape} do not match class map {t.shape}")
    w = _check_class_weights(class_weights, n_classes)
    flat_t = t.ravel().astype(np.intp)
    if flat_t.size == 0:
        raise ValueError("class map is empty")
    if (flat_t.min() < 0 or flat_t.max() >= n_classes):
        raise ValueError("target class ids out of range")
    # flat index of each pixel's target channel
    index = np.arange(flat_t.size) * n_classes + flat_t
    return p, flat_t, w, index


def weighted_cce(pred, target, class_weights) -> float:
    """Mean over pixels of ``w[target] * -log(p[target])``, p clamped to [1e-7, 1]."""
    p, t, w, index = _cce_inputs(pred, target, class_weights)
    p_target = np.minimum(np.maximum(p.ravel()[index], PROB_FLOOR), 1.0)
    return float((w[t] * -np.log(p_target)).sum() / t.size)


# --------------------------------------------------------------------------
# gradients


def dice_loss_grad(pred, target) -> np.ndarray:
    p, t = _pair(pred, target)
    num = 2.0 * np.sum(p * t) + EPS
    den = p.sum() + t.sum() + EPS
    return -(2.0 * t * den - num) / den**2


def jaccard_loss_grad(pred, target) -> np.ndarray:
    p, t = _pair(pred, target)
    inter = np.sum(p * t)
    num = inter + EPS
    den = p.sum() + t.sum() - inter + EPS
    return -(t * den - num * (1.0 - t)) / den**2


def combined_seg_loss_grad(pred, target) -> np.ndarray:
    d = dice_loss(pred, target)
    j = jaccard_loss(pred, target)
    total = d + j
    if total == 0:
        return np.zeros(np.shape(pred))
    return (j / total) ** 2 * dice_loss_grad(pred, target) + (d / total) ** 2 * jaccard_loss_grad(pred, target)


def weighted_cce_grad(pred, target, class_weights) -> np.ndarray:
    """Only the target channel of each pixel has a nonzero derivative."""
    p, t, w, index = _cce_inputs(pred, target, class_weights)
    p_target = p.ravel()[index]
    inside = p_target > PROB_FLOOR
    grad = np.zeros(p.size)
    grad[index] = np.where(inside, -w[t] / np.where(inside, p_target, 1.0), 0.0) / t.size
    return grad.reshape(p.shape)


# --------------------------------------------------------------------------
# weighting


@dataclass(frozen=True)
class LossWeights:
    lambda_a: float = 1.0
    lambda_b: float = 5.0
    lambda_c: float = 4.0
    class_weights: tuple[float, ...] = field(default_factory=lambda: (1.0,) * NUM_CLASSES)

    def __post_init__(self):
        lambdas = (self.lambda_a, self.lambda_b, self.lambda_c)
        if not all(np.isfinite(x) and x >= 0 for x in lambdas) or max(lambdas) <= 0:
            raise ValueError(f"lambdas must be finite, non-negative and not all zero: {lambdas}")
        _check_class_weights(self.class_weights, len(self.class_weights))

    def with_equal_class_weights(self) -> LossWeights:
        return LossWeights(self.lambda_a, self.lambda_b, self.lambda_c, (1.0,) * len(self.class_weights))


def weighted_sum(l_a: float, l_b: float, l_c: float, lw: LossWeights) -> float:
    return lw.lambda_a * l_a + lw.lambda_b * l_b + lw.lambda_c * l_c


@dataclass(frozen=True)
class LossBreakdown:
    semantic: float
    edge: float
    classification: float
    total: float


def total_loss(preds, targets, lw: LossWeights | None = None) -> LossBreakdown:
    """Weighted three-head loss.

    ``preds`` is ``(semantic, edges, class_probs)`` and ``targets`` is
    ``(semantic_mask, edge_mask, class_map)``.
    """
    lw = lw or LossWeights()
    semantic, edges, class_probs = preds
    semantic_t, edges_t, class_t = targets
    l_a = combined_seg_loss(semantic, semantic_t)
    l_b = combined_seg_loss(edges, edges_t)
    l_c = weighted_cce(class_probs, class_t, lw.class_weights)
    return LossBreakdown(l_a, l_b, l_c, weighted_sum(l_a, l_b, l_c, lw))


def inverse_frequency_weights(class_maps: Sequence[np.ndarray], n_classes: int = NUM_CLASSES) -> np.ndarray:
    """Inverse class-pixel frequency, normalized to mean 1.

    Classes absent from the corpus get the largest observed weight.
    """
    counts = np.zeros(n_classes, dtype=np.float64)
    for cm in class_maps:
        counts += np.bincount(np.asarray(cm).ravel().astype(np.intp), minlength=n_classes)[:n_classes]
    if counts.sum() == 0:
        return np.ones(n_classes)
    present = counts > 0
    inv = np.zeros(n_classes)
    inv[present] = counts.sum() / counts[present]
    inv[~present] = inv[present].max()
    return inv / inv.mean()


def parse_kv_config(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment, blank lines ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def weights_from_config(cfg: dict[str, str]) -> LossWeights:
    """LossWeights from parsed ``lambda_a``/``lambda_b``/``lambda_c``/``class_weights`` keys."""
    defaults = LossWeights()
    cw = cfg.get("class_weights")
    return LossWeights(
        lambda_a=float(cfg.get("lambda_a", defaults.lambda_a)),
        lambda_b=float(cfg.get("lambda_b", defaults.lambda_b)),
        lambda_c=float(cfg.get("lambda_c", defaults.lambda_c)),
        class_weights=tuple(float(x) for x in cw.split(",")) if cw else defaults.class_weights,
    )


def load_loss_weights(path: PathLike) -> LossWeights:
    """Read ``lambda_a``, ``lambda_b``, ``lambda_c`` and ``class_weights`` (comma list)."""
    return weights_from_config(parse_kv_config(Path(path).read_text()))
