"""Candidate training loop: the source of every fitness value."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from ..genome import Genome
from ..layers import BASE_LR, QUAD_LR, assign_lr_groups
from ..netbuilder import Network, build
from ..optim import adam_lookahead
from ..seeds import derive_seed
from ..tensor import Graph, NonFiniteError, Tensor, get_default_dtype
from .data import Sample, SegDataset, augment, batch_arrays, pad_to_multiple, unpad
from .losses import make_loss
from .metrics import Metrics, confusion_and_metrics

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch: int = 4
    loss: str = "focal"
    alpha: float = 0.75
    omega: float = 2.0
    threshold: float = 0.5
    base_channels: int = 8
    base_lr: float = BASE_LR
    quad_lr: float = QUAD_LR
    lookahead_k: int = 6
    lookahead_alpha: float = 0.05
    augment: bool = True
    val_fraction: float = 0.25

    def __post_init__(self):
        if self.epochs < 0 or self.batch < 1:
            raise ValueError(f"invalid budget epochs={self.epochs}, batch={self.batch}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    network: Network
    metrics: Metrics
    history: List[float] = field(default_factory=list)
    diverged: bool = False
    steps: int = 0

    @property
    def fitness(self) -> float:
        return 0.0 if self.diverged else self.metrics.fitness


Data = Union[SegDataset, Tuple[Sequence[Sample], Sequence[Sample]]]


def split_data(data: Data, cfg: TrainConfig) -> Tuple[List[Sample], List[Sample]]:
    if isinstance(data, SegDataset):
        return data.split(cfg.val_fraction)
    train, val = data
    return list(train), list(val)


def predict_proba(net: Network, samples: Sequence[Sample], batch: int = 4) -> List[np.ndarray]:
    """Probability maps (H, W) per sample, un-padded to the original size."""
    m = 2 ** net.depth
    out = []
    for i in range(0, len(samples), batch):
        chunk = [pad_to_multiple(s, m) for s in samples[i:i + batch]]
        x, _, _ = batch_arrays(chunk, net.dtype)
        p = net(Tensor(x)).data[:, 0]
        out.extend(unpad(pi, s.orig_hw) for pi, s in zip(p, chunk))
    return out


def evaluate(net: Network, samples: Sequence[Sample], threshold: float = 0.5, batch: int = 4) -> Metrics:
    """Pooled pixel metrics over all samples (inside each FOV when present)."""
    probs = predict_proba(net, samples, batch)
    p = np.concatenate([q.ravel() for q in probs])
    y = np.concatenate([s.mask.ravel() for s in samples])
    fov = None
    if any(s.fov is not None for s in samples):
        fov = np.concatenate([(s.fov if s.fov is not None else np.ones_like(s.mask)).ravel() for s in samples])
    return confusion_and_metrics(p, y, fov, threshold)


def train_candidate(genome: Genome, data: Data, cfg: Optional[TrainConfig] = None, seed: int = 0) -> TrainResult:
    """Train ``genome`` from scratch and score it on the validation split.

    Initialization, shuffling and augmentation draw from independent streams
    derived from ``seed``. A non-finite loss marks the candidate as diverged
    (fitness 0) instead of raising.
    """
    cfg = cfg or TrainConfig()
    dtype = get_default_dtype()
    train, val = split_data(data, cfg)
    net = build(genome, cfg.base_channels, 1, rng=derive_seed(seed, "init"), dtype=dtype)
    groups = assign_lr_groups(net, cfg.base_lr, cfg.quad_lr)
    opt = adam_lookahead(net.named_parameters(), groups.lr_for, k=cfg.lookahead_k, alpha=cfg.lookahead_alpha)
    loss_fn = make_loss(cfg.loss, cfg.alpha, cfg.omega)
    shuffle_rng = np.random.default_rng(derive_seed(seed, "shuffle"))
    aug_rng = np.random.default_rng(derive_seed(seed, "augment"))
    m = 2 ** net.depth
    train = [pad_to_multiple(s, m) for s in train]

    history: List[float] = []
    steps = 0
    diverged = False
    try:
        for epoch in range(cfg.epochs):
            order = shuffle_rng.permutation(len(train))
            total = 0.0
            for i in range(0, len(order), cfg.batch):
                chunk = [train[j] for j in order[i:i + cfg.batch]]
                if cfg.augment:
                    chunk = [augment(s, aug_rng) for s in chunk]
                x, y, _ = batch_arrays(chunk, dtype)
                opt.zero_grad()
                with Graph() as g:
                    loss = loss_fn(net(Tensor(x)), y)
                g.backward(loss, net.parameters())
                opt.step()
                steps += 1
                total += float(loss.item()) * len(chunk)
            history.append(total / len(train))
            if not math.isfinite(history[-1]):
                raise NonFiniteError(f"non-finite epoch loss at epoch {epoch}")
    except NonFiniteError as exc:
        log.warning("candidate %s diverged: %s", genome, exc)
        diverged = True
    if diverged:
        metrics = Metrics.from_counts(0, 0, 0, 0)
        metrics.flags = metrics.flags + ("diverged",)
    else:
        metrics = evaluate(net, val, cfg.threshold, cfg.batch)
    return TrainResult(net, metrics, history, diverged, steps)
