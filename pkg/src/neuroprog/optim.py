"""Adam with per-group learning rates, wrapped in Lookahead."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .tensor import Tensor


class OptimConfigError(ValueError):
    pass


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0


@dataclass
class LookaheadState:
    slow: List[np.ndarray]
    k: int = 6
    alpha: float = 0.05
    counter: int = 0


class Adam:
    """Adam with bias correction; ``lrs[i]`` is the learning rate of ``params[i]``."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lrs,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = list(params)
        if np.isscalar(lrs):
            lrs = [float(lrs)] * len(self.params)
        self.lrs = [float(lr) for lr in lrs]
        if len(self.lrs) != len(self.params):
            raise OptimConfigError("one learning rate per parameter is required")
        if any(lr <= 0 for lr in self.lrs):
            raise OptimConfigError(f"learning rates must be positive, got {sorted(set(self.lrs))}")
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.state = AdamState([np.zeros_like(p.data) for p in self.params], [np.zeros_like(p.data) for p in self.params])

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        st = self.state
        st.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m, v = st.m[i], st.v[i]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            upd = self.lrs[i] * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - upd).astype(p.data.dtype, copy=False)


class Lookahead:
    """Every ``k`` inner steps: slow += alpha * (fast - slow); fast = slow."""

    def __init__(self, inner: Adam, k: int = 6, alpha: float = 0.05):
        if k < 1 or not 0.0 < alpha <= 1.0:
            raise OptimConfigError(f"invalid lookahead parameters k={k}, alpha={alpha}")
        self.inner = inner
        self.state = LookaheadState([p.data.copy() for p in inner.params], k=k, alpha=alpha)

    @property
    def params(self):
        return self.inner.params

    def zero_grad(self) -> None:
        self.inner.zero_grad()

    def step(self) -> None:
        self.inner.step()
        st = self.state
        st.counter += 1
        if st.counter % st.k == 0:
            for slow, p in zip(st.slow, self.inner.params):
                slow += st.alpha * (p.data - slow)
                p.data = slow.copy()


def adam_lookahead(
    named_params: Sequence[Tuple[str, Tensor]],
    lr_for,
    k: int = 6,
    alpha: float = 0.05,
    betas: Tuple[float, float] = (0.9, 0.999),
) -> Lookahead:
    """Build the training optimizer; ``lr_for(name)`` gives each parameter's group rate."""
    params = [t for _, t in named_params]
    lrs = [lr_for(n) for n, _ in named_params]
    return Lookahead(Adam(params, lrs, betas=betas), k=k, alpha=alpha)


def adam_lookahead_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], opt: Lookahead) -> Sequence[Tensor]:
    """Functional-style single step: install ``grads`` then advance ``opt``."""
    for p, g in zip(params, grads):
        p.grad = g
    opt.step()
    return params
