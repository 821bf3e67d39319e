"""Segmentation losses as differentiable ops on probability maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor import ShapeError, Tensor, custom_op

CLAMP = 1e-7
SMOOTH = 1.0


@dataclass(frozen=True)
class FocalParams:
    """``alpha`` weights the positive (vessel) class, ``omega`` is the focusing exponent."""

    alpha: float = 0.75
    omega: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.omega < 0:
            raise ValueError(f"omega must be >= 0, got {self.omega}")


def _check(pred: Tensor, target, what: str) -> np.ndarray:
    y = np.asarray(target.data if isinstance(target, Tensor) else target)
    if pred.shape != y.shape:
        raise ShapeError(f"{what}: prediction {pred.shape} and target {y.shape} differ")
    if pred.size == 0:
        raise ValueError(f"{what}: empty input")
    return y.astype(pred.dtype, copy=False)


def focal_loss(pred: Tensor, target, params: FocalParams = FocalParams(), reduction: str = "mean") -> Tensor:
    """Binary focal loss on probabilities, clamped to [1e-7, 1 - 1e-7].

    ``reduction="mean"`` averages over pixels, ``"sum"`` keeps the raw sum.
    """
    y = _check(pred, target, "focal_loss")
    a, w = params.alpha, params.omega
    p_raw = pred.data
    p = np.clip(p_raw, CLAMP, 1.0 - CLAMP)
    q = 1.0 - p
    lp, lq = np.log(p), np.log(q)
    pos = a * y * q ** w * lp
    neg = (1.0 - a) * (1.0 - y) * p ** w * lq
    scale = 1.0 / p.size if reduction == "mean" else 1.0
    out = np.asarray(-(pos + neg).sum() * scale, dtype=pred.dtype)

    def bwd(g):
        dpos = a * y * (q ** w / p - (w * q ** (w - 1) * lp if w else 0.0))
        dneg = (1.0 - a) * (1.0 - y) * ((w * p ** (w - 1) * lq if w else 0.0) - p ** w / q)
        inside = (p_raw >= CLAMP) & (p_raw <= 1.0 - CLAMP)
        return (-(dpos + dneg) * scale * g * inside,)

    return custom_op("focal_loss", (pred,), out, bwd)


def bce_loss(pred: Tensor, target, reduction: str = "mean") -> Tensor:
    """Plain binary cross-entropy on clamped probabilities."""
    y = _check(pred, target, "bce_loss")
    p_raw = pred.data
    p = np.clip(p_raw, CLAMP, 1.0 - CLAMP)
    scale = 1.0 / p.size if reduction == "mean" else 1.0
    out = np.asarray(-(y * np.log(p) + (1 - y) * np.log(1 - p)).sum() * scale, dtype=pred.dtype)

    def bwd(g):
        inside = (p_raw >= CLAMP) & (p_raw <= 1.0 - CLAMP)
        return ((-(y / p) + (1 - y) / (1 - p)) * scale * g * inside,)

    return custom_op("bce_loss", (pred,), out, bwd)


def dice_loss(pred: Tensor, target, smooth: float = SMOOTH) -> Tensor:
    """Soft Dice: 1 - (2 sum(p*y) + s) / (sum(p) + sum(y) + s)."""
    y = _check(pred, target, "dice_loss")
    p = pred.data
    num = 2.0 * (p * y).sum() + smooth
    den = p.sum() + y.sum() + smooth
    out = np.asarray(1.0 - num / den, dtype=pred.dtype)
    return custom_op("dice_loss", (pred,), out, lambda g: (-(2.0 * y * den - num) / den ** 2 * g,))


def jaccard_loss(pred: Tensor, target, smooth: float = SMOOTH) -> Tensor:
    """Soft Jaccard: 1 - (sum(p*y) + s) / (sum(p) + sum(y) - sum(p*y) + s)."""
    y = _check(pred, target, "jaccard_loss")
    p = pred.data
    inter = (p * y).sum()
    num = inter + smooth
    den = p.sum() + y.sum() - inter + smooth
    out = np.asarray(1.0 - num / den, dtype=pred.dtype)
    return custom_op("jaccard_loss", (pred,), out, lambda g: (-(y * den - num * (1.0 - y)) / den ** 2 * g,))


LOSSES = ("focal", "dice", "jaccard")


def make_loss(name: str, alpha: float = 0.75, omega: float = 2.0):
    if name == "focal":
        fp = FocalParams(alpha, omega)
        return lambda p, y: focal_loss(p, y, fp)
    if name == "dice":
        return dice_loss
    if name == "jaccard":
        return jaccard_loss
    raise ValueError(f"unknown loss {name!r}; choose one of {LOSSES}")
