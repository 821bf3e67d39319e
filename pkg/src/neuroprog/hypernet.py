"""Predict genomes from (depth, base channels) using the search archive.

Inputs are a one-hot depth over {2, 3, 4} plus the channel count scaled to
[0, 1] over [5, 35]. A 2x64 ReLU trunk feeds two heads: a 16-way op-gene
classifier per node position and a binary output per connection bit. Block
``i`` of a genome occupies output slot ``i``; positions beyond a genome's
``2d+1`` blocks are masked out of the loss.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .genome import (
    DEFAULT_N_INT,
    DEPTHS,
    JOINT,
    BlockGenome,
    Genome,
    as_joint,
    conn_length,
    decode,
    encode,
    plain_unet_genome,
    random_genome,
    summary_string,
)
from .netbuilder import param_count
from .optim import Adam
from .tensor import Graph, NonFiniteError, Tensor, add, custom_op, linear, relu

log = logging.getLogger(__name__)

CHANNELS = tuple(range(5, 36, 5))
CH_MIN, CH_MAX = 5, 35
N_CLASSES = 16
HIDDEN = 64
TOP_K = 10
MAX_BLOCKS = 2 * max(DEPTHS) + 1
DTYPE = np.float64


class HypernetError(ValueError):
    pass


def features(depth: int, channels: int) -> np.ndarray:
    if depth not in DEPTHS:
        raise HypernetError(f"depth must be one of {DEPTHS}, got {depth}")
    x = np.zeros(len(DEPTHS) + 1, dtype=DTYPE)
    x[DEPTHS.index(depth)] = 1.0
    x[-1] = (channels - CH_MIN) / (CH_MAX - CH_MIN)
    return x


@dataclass
class HyperDataset:
    x: np.ndarray
    ops: np.ndarray
    op_mask: np.ndarray
    conn: np.ndarray
    conn_mask: np.ndarray
    groups: List[Tuple[int, int]]
    genomes: List[str]
    fitness: List[float]
    n_int: int = DEFAULT_N_INT
    skipped: List[Tuple[int, int]] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.genomes)

    def rows_for(self, group: Tuple[int, int]) -> List[int]:
        return [i for i, g in enumerate(self.groups) if g == group]


def encode_targets(genome: Genome, n_int: int = DEFAULT_N_INT):
    """Padded (ops, op_mask, conn, conn_mask) arrays for one joint genome."""
    g = as_joint(genome)
    if g.n_int != n_int:
        raise HypernetError(f"genome has {g.n_int} nodes per block, model expects {n_int}")
    c = conn_length(n_int)
    ops = np.zeros(MAX_BLOCKS * n_int, dtype=np.int64)
    op_mask = np.zeros(MAX_BLOCKS * n_int, dtype=bool)
    conn = np.zeros(MAX_BLOCKS * c, dtype=DTYPE)
    conn_mask = np.zeros(MAX_BLOCKS * c, dtype=bool)
    for i, blk in enumerate(g.blocks):
        ops[i * n_int:(i + 1) * n_int] = blk.ops
        op_mask[i * n_int:(i + 1) * n_int] = True
        conn[i * c:(i + 1) * c] = [b for grp in blk.conn for b in grp]
        conn_mask[i * c:(i + 1) * c] = True
    return ops, op_mask, conn, conn_mask


def build_dataset(
    records: Iterable,
    channels: Sequence[int] = CHANNELS,
    depths: Sequence[int] = DEPTHS,
    top_k: int = TOP_K,
    n_int: int = DEFAULT_N_INT,
) -> HyperDataset:
    """Top-``top_k`` distinct genomes by fitness for every (depth, channels) group."""
    best: Dict[Tuple[int, int], Dict[str, float]] = defaultdict(dict)
    for r in records:
        key = (int(r.depth), int(r.base_channels))
        seen = best[key]
        if r.genome not in seen or r.fitness > seen[r.genome]:
            seen[r.genome] = float(r.fitness)
    rows = []
    skipped, warnings = [], []
    for d in depths:
        for ch in channels:
            pool = best.get((d, ch), {})
            if not pool:
                skipped.append((d, ch))
                continue
            ranked = sorted(pool.items(), key=lambda kv: (-kv[1], kv[0]))[:top_k]
            if len(ranked) < top_k:
                msg = f"group depth={d} channels={ch}: only {len(ranked)} records (wanted {top_k})"
                log.warning(msg)
                warnings.append(msg)
            rows.extend(((d, ch), text, fit) for text, fit in ranked)
    if not rows:
        raise HypernetError("no archive records fall in the requested groups")
    return _from_rows([r[0] for r in rows], [r[1] for r in rows], [r[2] for r in rows], n_int, skipped, warnings)


def _from_rows(groups, genomes, fitness, n_int, skipped=(), warnings=()) -> HyperDataset:
    xs, ops, om, cs, cm = [], [], [], [], []
    for (d, ch), text in zip(groups, genomes):
        g = decode(text)
        if g.depth != d:
            raise HypernetError(f"record depth {d} disagrees with genome depth {g.depth}")
        o, m1, c, m2 = encode_targets(g, n_int)
        xs.append(features(d, ch))
        ops.append(o)
        om.append(m1)
        cs.append(c)
        cm.append(m2)
    return HyperDataset(
        np.stack(xs), np.stack(ops), np.stack(om), np.stack(cs), np.stack(cm),
        [tuple(g) for g in groups], list(genomes), list(fitness), n_int, [tuple(s) for s in skipped], list(warnings),
    )


def save_dataset(ds: HyperDataset, path) -> Path:
    path = Path(path)
    obj = {
        "n_int": ds.n_int,
        "rows": [{"depth": g[0], "channels": g[1], "genome": t, "fitness": f}
                 for g, t, f in zip(ds.groups, ds.genomes, ds.fitness)],
        "skipped": [list(s) for s in ds.skipped],
        "warnings": ds.warnings,
    }
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path


def load_dataset(path) -> HyperDataset:
    obj = json.loads(Path(path).read_text())
    rows = obj["rows"]
    if not rows:
        raise HypernetError(f"{path}: dataset has no rows")
    return _from_rows(
        [(r["depth"], r["channels"]) for r in rows], [r["genome"] for r in rows], [r["fitness"] for r in rows],
        obj.get("n_int", DEFAULT_N_INT), obj.get("skipped", ()), obj.get("warnings", ()),
    )


# --------------------------------------------------------------------------
# masked losses

def masked_softmax_ce(logits: Tensor, targets: np.ndarray, mask: np.ndarray, k: int = N_CLASSES) -> Tensor:
    """Mean categorical cross-entropy over unmasked positions; logits are (B, P*k)."""
    B, P = targets.shape
    z = logits.data.reshape(B, P, k)
    z = z - z.max(axis=2, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=2, keepdims=True))
    logp = z - lse
    n = max(int(mask.sum()), 1)
    picked = np.take_along_axis(logp, targets[..., None], axis=2)[..., 0]
    out = np.asarray(-(picked * mask).sum() / n, dtype=logits.dtype)

    def bwd(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], 2) - 1.0, 2)
        grad *= mask[..., None] / n
        return (grad.reshape(B, P * k) * g,)

    return custom_op("masked_softmax_ce", (logits,), out, bwd)


def masked_bce_logits(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean binary cross-entropy with logits over unmasked positions."""
    z = logits.data
    n = max(int(mask.sum()), 1)
    loss = np.maximum(z, 0) - z * targets + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray((loss * mask).sum() / n, dtype=logits.dtype)
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))

    return custom_op("masked_bce_logits", (logits,), out, lambda g: ((sig - targets) * mask / n * g,))


# --------------------------------------------------------------------------
# model

class HypernetModel:
    def __init__(self, n_int: int = DEFAULT_N_INT, hidden: int = HIDDEN, rng=0):
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        self.n_int = n_int
        self.hidden = hidden
        n_in = len(DEPTHS) + 1
        n_ops = MAX_BLOCKS * n_int * N_CLASSES
        n_conn = MAX_BLOCKS * conn_length(n_int)
        shapes = {"fc1": (n_in, hidden), "fc2": (hidden, hidden), "ops": (hidden, n_ops), "conn": (hidden, n_conn)}
        self.params: Dict[str, Tensor] = {}
        for name, (i, o) in shapes.items():
            bound = 1.0 / math.sqrt(i)
            self.params[f"{name}.w"] = Tensor(rng.uniform(-bound, bound, (i, o)).astype(DTYPE), requires_grad=True)
            self.params[f"{name}.b"] = Tensor(np.zeros(o, DTYPE), requires_grad=True)

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return list(self.params.items())

    def forward(self, x: np.ndarray) -> Tuple[Tensor, Tensor]:
        p = self.params
        h = relu(linear(Tensor(np.asarray(x, DTYPE)), p["fc1.w"], p["fc1.b"]))
        h = relu(linear(h, p["fc2.w"], p["fc2.b"]))
        return linear(h, p["ops.w"], p["ops.b"]), linear(h, p["conn.w"], p["conn.b"])

    def loss(self, ds: HyperDataset, idx) -> Tensor:
        op_logits, conn_logits = self.forward(ds.x[idx])
        ce = masked_softmax_ce(op_logits, ds.ops[idx], ds.op_mask[idx])
        bce = masked_bce_logits(conn_logits, ds.conn[idx], ds.conn_mask[idx])
        return add(ce, bce)

    def probabilities(self, depth: int, channels: int) -> Tuple[np.ndarray, np.ndarray]:
        op_logits, conn_logits = self.forward(features(depth, channels)[None])
        z = op_logits.data.reshape(MAX_BLOCKS * self.n_int, N_CLASSES)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True), 0.5 * (1.0 + np.tanh(0.5 * conn_logits.data[0]))

    def save(self, path, meta: Optional[dict] = None) -> Path:
        info = {"kind": "hypernet", "n_int": self.n_int, "hidden": self.hidden}
        info.update(meta or {})
        return save_checkpoint(path, {n: t.data for n, t in self.params.items()}, info)

    @classmethod
    def load(cls, path) -> "HypernetModel":
        tensors, meta = load_checkpoint(path)
        if meta.get("kind") != "hypernet":
            raise HypernetError(f"{path}: not a hypernetwork checkpoint")
        model = cls(meta["n_int"], meta["hidden"])
        if set(tensors) != set(model.params):
            raise HypernetError(f"{path}: parameter names do not match the model")
        for n, t in model.params.items():
            t.data = tensors[n].astype(DTYPE)
        return model


@dataclass
class HyperTrainConfig:
    epochs: int = 200
    batch: int = 4
    lr: float = 1e-3
    seed: int = 0
    hidden: int = HIDDEN


def train_hypernet(ds: HyperDataset, cfg: Optional[HyperTrainConfig] = None) -> Tuple[HypernetModel, List[float]]:
    """Adam on masked CE (ops) + masked BCE (connections); returns the model and per-epoch loss."""
    cfg = cfg or HyperTrainConfig()
    if len(ds) == 0:
        raise HypernetError("empty hypernetwork dataset")
    rng = np.random.default_rng(cfg.seed)
    model = HypernetModel(ds.n_int, cfg.hidden, rng)
    opt = Adam([t for _, t in model.named_parameters()], cfg.lr)
    curve: List[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(ds))
        total = 0.0
        try:
            for i in range(0, len(order), cfg.batch):
                idx = order[i:i + cfg.batch]
                opt.zero_grad()
                with Graph() as g:
                    loss = model.loss(ds, idx)
                g.backward(loss, opt.params)
                opt.step()
                total += loss.item() * len(idx)
        except NonFiniteError as exc:
            last = curve[-1] if curve else float("nan")
            raise HypernetError(f"hypernetwork diverged at epoch {epoch + 1}; last finite loss {last}") from exc
        curve.append(total / len(ds))
    return model, curve


def write_loss_curve(curve: Sequence[float], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(curve, 1):
            w.writerow([i, f"{v:.8f}"])
    return path


# --------------------------------------------------------------------------
# prediction

@dataclass
class Prediction:
    depth: int
    channels: int
    genome: Genome
    summary: str
    params: int

    def to_json(self) -> dict:
        return {
            "depth": self.depth,
            "channels": self.channels,
            "genome": encode(self.genome),
            "summary": self.summary,
            "params": self.params,
        }


def predict(model: HypernetModel, depth: int, channels: int) -> Prediction:
    """Argmax op per node, connection bits thresholded at 0.5."""
    if not CH_MIN <= channels <= CH_MAX:
        log.warning("channels=%d outside the trained range [%d, %d]", channels, CH_MIN, CH_MAX)
    probs, conn_p = model.probabilities(depth, channels)
    n, c = model.n_int, conn_length(model.n_int)
    blocks = []
    for i in range(2 * depth + 1):
        ops = tuple(int(v) for v in probs[i * n:(i + 1) * n].argmax(axis=1))
        bits = (conn_p[i * c:(i + 1) * c] > 0.5).astype(int).tolist()
        conn, pos = [], 0
        for j in range(1, n):
            conn.append(tuple(bits[pos:pos + j]))
            pos += j
        blocks.append(BlockGenome(tuple(conn), ops))
    genome = decode(encode(Genome(depth, JOINT, tuple(blocks))))
    return Prediction(depth, channels, genome, summary_string(genome), param_count(genome, channels))


def _positions(ds: HyperDataset, row: int) -> np.ndarray:
    """Concatenated op values and connection bits of a row (masked positions as -1)."""
    ops = np.where(ds.op_mask[row], ds.ops[row], -1)
    conn = np.where(ds.conn_mask[row], ds.conn[row].astype(np.int64), -1)
    return np.concatenate([ops, conn])


def _mode(values: np.ndarray) -> int:
    vals = values[values >= 0]
    if vals.size == 0:
        return -1
    c = Counter(vals.tolist())
    top = max(c.values())
    return min(v for v, k in c.items() if k == top)


def agreement(model: HypernetModel, ds: HyperDataset) -> dict:
    """Per-position agreement with each group's modal gene, against a marginal-mode baseline.

    The baseline predicts, at every position, the most common value over all
    training rows, ignoring the inputs.
    """
    groups = sorted(set(ds.groups))
    pos = np.stack([_positions(ds, i) for i in range(len(ds))])
    model_hits = base_hits = total = 0
    per_group = {}
    for grp in groups:
        rows = ds.rows_for(grp)
        modal = np.array([_mode(pos[rows, k]) for k in range(pos.shape[1])])
        marginal = np.array([_mode(pos[:, k]) for k in range(pos.shape[1])])
        p = predict(model, *grp)
        o, m1, c, m2 = encode_targets(p.genome, ds.n_int)
        pred = np.concatenate([np.where(m1, o, -1), np.where(m2, c.astype(np.int64), -1)])
        valid = modal >= 0
        mh = int(np.sum(pred[valid] == modal[valid]))
        bh = int(np.sum(marginal[valid] == modal[valid]))
        per_group[f"{grp[0]}x{grp[1]}"] = {"model": mh / valid.sum(), "baseline": bh / valid.sum()}
        model_hits += mh
        base_hits += bh
        total += int(valid.sum())
    return {"model": model_hits / total, "baseline": base_hits / total, "groups": per_group}


def eval_hypernet(
    model: HypernetModel, ds: HyperDataset, data, train_cfg, seeds: Sequence[int] = (0,), groups=None
) -> List[dict]:
    """Train predicted, archived-best and plain U-Net genomes per group under one budget.

    ``groups`` restricts the evaluation to some (depth, channels) pairs.
    """
    from .segtrain.train import train_candidate

    rows = []
    wanted = sorted(set(ds.groups)) if groups is None else [tuple(g) for g in groups]
    for grp in wanted:
        if grp not in ds.groups:
            raise HypernetError(f"group depth={grp[0]} channels={grp[1]} has no dataset rows")
        depth, ch = grp
        idx = ds.rows_for(grp)
        top = max(idx, key=lambda i: (ds.fitness[i], -i))
        cand = {
            "predicted": predict(model, depth, ch).genome,
            "archived_best": decode(ds.genomes[top]),
            "plain_unet": plain_unet_genome(depth, ds.n_int),
        }
        cfg = replace(train_cfg, base_channels=ch)
        for seed in seeds:
            f1 = {k: train_candidate(g, data, cfg, seed).fitness for k, g in cand.items()}
            rows.append({
                "depth": depth,
                "channels": ch,
                "seed": seed,
                "predicted_f1": f1["predicted"],
                "archived_best_f1": f1["archived_best"],
                "plain_unet_f1": f1["plain_unet"],
                "delta_vs_best": f1["predicted"] - f1["archived_best"],
                "delta_vs_plain": f1["predicted"] - f1["plain_unet"],
                "predicted": encode(cand["predicted"]),
                "summary": summary_string(cand["predicted"]),
            })
    return rows


# --------------------------------------------------------------------------
# toy archives

def toy_archive(groups: Sequence[Tuple[int, int]], per_group: int = 20, flip: float = 0.06, seed: int = 0):
    """Synthetic archive records: noisy copies of one template per group.

    Fitness falls with Hamming distance to the template, so each group's top
    rows concentrate around it.
    """
    from .evolution import ArchiveRecord

    rng = np.random.default_rng(seed)
    out = []
    for depth, ch in groups:
        template = random_genome(rng, depth)
        tb = template.bits()
        for k in range(per_group):
            bits = tb ^ (rng.random(tb.size) < flip).astype(np.uint8)
            g = Genome.from_bits(depth, template.n_int, JOINT, bits)
            fit = float(np.clip(0.85 - 0.5 * np.mean(bits != tb) + rng.normal(0, 0.005), 0, 1))
            out.append(ArchiveRecord(
                run_id="toy", depth=depth, base_channels=ch, genome=encode(g), fitness=fit,
                metrics={"f1": fit}, params=param_count(g, ch), seed=k, generation=0,
            ))
    return out
