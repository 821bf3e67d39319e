"""Conventional and quadratic convolutional neuron layers.

A quadratic layer computes ``(conv(x,w1)+b1) * (conv(x,w2)+b2) + conv(x*x,w3) + b3``.
ReLinear initialization (``w2=0, b2=1, w3=0, b3=0``) makes it start out as the
conventional layer with the same ``(w1, b1)``; the quadratic branches then
train at a reduced learning rate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional

import numpy as np

from .tensor import Tensor, conv2d, get_default_dtype, quadconv2d

BASE_LR = 1e-3
QUAD_LR = 1e-4
QUAD_BRANCH = ("w2", "b2", "w3", "b3")


class OrphanParameterError(ValueError):
    """A trainable parameter could not be assigned to a learning-rate group."""


INIT_SCHEMES = ("fanin", "kaiming")
_init_scheme = "fanin"


def set_init_scheme(name: str) -> str:
    """Choose the conventional-weight init; returns the previous scheme."""
    global _init_scheme
    if name not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {name!r}; choose one of {INIT_SCHEMES}")
    prev, _init_scheme = _init_scheme, name
    return prev


def conv_init(rng: np.random.Generator, shape: tuple, dtype=None) -> np.ndarray:
    """Uniform weights with fan_in = Cin * k * k.

    ``fanin`` (default) bounds by 1/sqrt(fan_in); ``kaiming`` by sqrt(6/fan_in).
    The larger He bound lets activations grow through the summed node
    outputs, which quadratic chains then amplify, and short training budgets
    end noticeably worse with it.
    """
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in) if _init_scheme == "kaiming" else 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype or get_default_dtype())


class ConvNeuronLayer:
    """Same-padded convolution with per-output-channel bias."""

    quadratic = False

    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator, dtype=None):
        if kernel % 2 != 1:
            raise ValueError(f"kernel must be odd, got {kernel}")
        dtype = dtype or get_default_dtype()
        self.kernel = kernel
        self.w1 = Tensor(conv_init(rng, (cout, cin, kernel, kernel), dtype), requires_grad=True)
        self.b1 = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def params(self) -> Dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1}

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w1, self.b1)


class QuadNeuronLayer:
    """Quadratic convolutional neurons with three filter banks of one shape."""

    quadratic = True

    def __init__(
        self,
        cin: int,
        cout: int,
        kernel: int,
        rng: Optional[np.random.Generator] = None,
        dtype=None,
        weights: Optional[Dict[str, np.ndarray]] = None,
    ):
        if kernel % 2 != 1:
            raise ValueError(f"kernel must be odd, got {kernel}")
        dtype = dtype or get_default_dtype()
        self.kernel = kernel
        if weights is not None:
            shapes = {weights[k].shape for k in ("w1", "w2", "w3")}
            if len(shapes) != 1:
                raise ValueError(f"filter banks w1/w2/w3 must share one shape, got {sorted(shapes)}")
            for name in ("w1", "b1", "w2", "b2", "w3", "b3"):
                setattr(self, name, Tensor(np.asarray(weights[name], dtype=dtype), requires_grad=True))
            if self.w1.shape != (cout, cin, kernel, kernel):
                raise ValueError(f"weights shaped {self.w1.shape}, expected {(cout, cin, kernel, kernel)}")
        else:
            if rng is None:
                raise ValueError("either rng or weights is required")
            relinear_init(self, rng, cin=cin, cout=cout, dtype=dtype)

    def params(self) -> Dict[str, Tensor]:
        return {n: getattr(self, n) for n in ("w1", "b1", "w2", "b2", "w3", "b3")}

    def __call__(self, x: Tensor) -> Tensor:
        return quad_forward(x, self)


def quad_forward(x: Tensor, layer: QuadNeuronLayer) -> Tensor:
    return quadconv2d(x, layer.w1, layer.b1, layer.w2, layer.b2, layer.w3, layer.b3)


def relinear_init(layer: QuadNeuronLayer, rng: np.random.Generator, cin=None, cout=None, dtype=None):
    """ReLinear start: w1/b1 get the conventional init, w2=0, b2=1, w3=0, b3=0.

    The rng draws are exactly those of :class:`ConvNeuronLayer`, so a layer and
    its conventional twin built from the same stream share ``(w1, b1)``.
    """
    if cin is None:
        cout, cin = layer.w1.shape[:2]
        dtype = layer.w1.dtype
    k = layer.kernel
    shape = (cout, cin, k, k)
    layer.w1 = Tensor(conv_init(rng, shape, dtype), requires_grad=True)
    layer.b1 = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    layer.w2 = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
    layer.b2 = Tensor(np.ones(cout, dtype=dtype), requires_grad=True)
    layer.w3 = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
    layer.b3 = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    return layer


@dataclass
class LrGroups:
    """Partition of trainable parameters into learning-rate groups."""

    base: List[str] = field(default_factory=list)
    quad: List[str] = field(default_factory=list)
    base_lr: float = BASE_LR
    quad_lr: float = QUAD_LR

    def lr_for(self, name: str) -> float:
        return self.quad_lr if name in self.quad else self.base_lr

    def as_list(self):
        return [(self.base, self.base_lr), (self.quad, self.quad_lr)]


def assign_lr_groups(named_params: Iterable, base_lr: float = BASE_LR, quad_lr: float = QUAD_LR) -> LrGroups:
    """Put quadratic-branch tensors (w2, b2, w3, b3) in the slow group, the rest in base.

    Accepts a network (anything with ``named_parameters()``) or an iterable of
    ``(name, tensor)`` pairs.
    """
    if hasattr(named_params, "named_parameters"):
        named_params = named_params.named_parameters()
    groups = LrGroups(base_lr=base_lr, quad_lr=quad_lr)
    for name, t in named_params:
        if not t.requires_grad:
            continue
        leaf = name.rsplit(".", 1)[-1]
        if leaf in QUAD_BRANCH:
            groups.quad.append(name)
        elif leaf in ("w1", "b1"):
            groups.base.append(name)
        else:
            raise OrphanParameterError(f"parameter {name!r} matches no learning-rate group")
    return groups


def layer_param_count(cin: int, cout: int, kernel: int, quadratic: bool) -> int:
    n = cout * cin * kernel * kernel + cout
    return 3 * n if quadratic else n
