"""Build executable U-shaped networks from genomes.

Layout for depth ``d`` and base width ``C``::

    stem 3x3 (in -> C)
    encoder block 0 @ C            -> skip 0
    maxpool, 1x1 (C -> 2C)
    ...
    bottleneck block @ C * 2**d
    upsample x2, 1x1 (halve), + skip, decoder block
    ...
    head 1x1 (C -> 1), sigmoid

Inside a block, nodes without predecessors read the block input, nodes with
several predecessors sum them, and every node without successors contributes
to the (summed) block output.
"""

from __future__ import annotations

import logging
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .genome import Genome, OpGene, as_joint
from .layers import ConvNeuronLayer, QuadNeuronLayer, layer_param_count
from .tensor import (
    ShapeError,
    Tensor,
    add,
    add_n,
    conv2d,
    get_default_dtype,
    instance_norm,
    maxpool2x2,
    relu,
    sigmoid,
    upsample_nearest2x,
)

log = logging.getLogger(__name__)


class Node:
    """One intermediate node: its operation gene and neuron layer."""

    def __init__(self, gene: OpGene, channels: int, rng: np.random.Generator, dtype):
        self.gene = gene
        cls = QuadNeuronLayer if gene.quadratic else ConvNeuronLayer
        self.layer = cls(channels, channels, gene.kernel, rng=rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        g = self.gene
        if g.post_activation:
            y = self.layer(x)
            if g.instance_norm:
                y = instance_norm(y)
            return relu(y)
        if g.instance_norm:
            x = instance_norm(x)
        return self.layer(relu(x))


class Block:
    def __init__(self, spec, genes: List[OpGene], channels: int, rng, dtype):
        self.spec = spec
        self.channels = channels
        self.nodes = [Node(gene, channels, rng, dtype) for gene in genes]
        n = len(genes)
        self.preds = [spec.predecessors(i + 1) for i in range(n)]
        self.sinks = [i + 1 for i in range(n) if not spec.successors(i + 1)]

    def __call__(self, x: Tensor) -> Tensor:
        outs: Dict[int, Tensor] = {}
        for i, node in enumerate(self.nodes, start=1):
            preds = self.preds[i - 1]
            inp = add_n([outs[p] for p in preds]) if preds else x
            outs[i] = node(inp)
        return add_n([outs[i] for i in self.sinks])


class Network:
    """A built U-Net; parameters are addressable by stable dotted names."""

    def __init__(self, genome: Genome, base_channels: int, in_channels: int, rng, dtype=None):
        if base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        genome = as_joint(genome)
        dtype = np.dtype(dtype or get_default_dtype())
        self.genome = genome
        self.base_channels = base_channels
        self.in_channels = in_channels
        self.dtype = dtype
        d, C = genome.depth, base_channels
        self.stem = ConvNeuronLayer(in_channels, C, 3, rng, dtype)
        self.blocks: List[Block] = []
        self.down: List[ConvNeuronLayer] = []
        self.up: List[ConvNeuronLayer] = []
        for i in range(2 * d + 1):
            level = i if i <= d else 2 * d - i
            ch = C * 2 ** level
            self.blocks.append(Block(genome.blocks[i], genome.op_genes(i), ch, rng, dtype))
            if i < d:
                self.down.append(ConvNeuronLayer(ch, 2 * ch, 1, rng, dtype))
            elif i < 2 * d:
                self.up.append(ConvNeuronLayer(ch, ch // 2, 1, rng, dtype))
        self.head = ConvNeuronLayer(C, 1, 1, rng, dtype)

    @property
    def depth(self) -> int:
        return self.genome.depth

    def named_layers(self) -> Iterator[Tuple[str, object]]:
        yield "stem", self.stem
        for i, blk in enumerate(self.blocks):
            for j, node in enumerate(blk.nodes, start=1):
                yield f"blk{i}.node{j}", node.layer
        for i, lay in enumerate(self.down):
            yield f"down{i}", lay
        for i, lay in enumerate(self.up):
            yield f"up{i}", lay
        yield "head", self.head

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return [(f"{ln}.{pn}", t) for ln, lay in self.named_layers() for pn, t in lay.params().items()]

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {n: t.data for n, t in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        named = dict(self.named_parameters())
        missing = set(named) - set(state)
        extra = set(state) - set(named)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for n, t in named.items():
            if state[n].shape != t.shape:
                raise ValueError(f"{n}: checkpoint shape {state[n].shape} != network shape {t.shape}")
            t.data = np.ascontiguousarray(state[n], dtype=self.dtype)

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.parameters()))

    def check_input(self, x: Tensor) -> None:
        if x.data.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"expected (B, {self.in_channels}, H, W) input, got {x.shape}")
        m = 2 ** self.depth
        H, W = x.shape[2:]
        if H % m or W % m:
            raise ShapeError(
                f"input {H}x{W} is not divisible by 2**depth = {m}; pad images to a multiple of {m}"
            )

    def logits(self, x: Tensor) -> Tensor:
        self.check_input(x)
        d = self.depth
        h = self.stem(x)
        skips = []
        for i in range(d):
            h = self.blocks[i](h)
            skips.append(h)
            h = self.down[i](maxpool2x2(h))
        h = self.blocks[d](h)
        for j in range(d):
            h = self.up[j](upsample_nearest2x(h))
            h = add(h, skips[d - 1 - j])
            h = self.blocks[d + 1 + j](h)
        return self.head(h)

    def __call__(self, x: Tensor) -> Tensor:
        return sigmoid(self.logits(x))


def build(genome: Genome, base_channels: int = 8, in_channels: int = 1, rng=None, dtype=None) -> Network:
    """Construct and initialize the network for ``genome``.

    ``rng`` may be a Generator or an integer seed; quadratic nodes are
    ReLinear-initialized.
    """
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    return Network(genome, base_channels, in_channels, rng, dtype)


def param_count(genome: Genome, base_channels: int, in_channels: int = 1) -> int:
    """Closed-form parameter count matching :func:`build`."""
    genome = as_joint(genome)
    d, C = genome.depth, base_channels
    total = layer_param_count(in_channels, C, 3, False) + layer_param_count(C, 1, 1, False)
    for i, blk in enumerate(genome.blocks):
        level = i if i <= d else 2 * d - i
        ch = C * 2 ** level
        for gene in genome.op_genes(i):
            total += layer_param_count(ch, ch, gene.kernel, gene.quadratic)
        if i < d:
            total += layer_param_count(ch, 2 * ch, 1, False)
        elif i < 2 * d:
            total += layer_param_count(ch, ch // 2, 1, False)
    return total


def to_dot(genome: Genome, name: str = "genome") -> str:
    """Graphviz text: one cluster per block, nodes labelled by their operation."""
    genome = as_joint(genome)
    d = genome.depth
    lines = [f'digraph "{name}" {{', "  rankdir=LR;", "  node [shape=box, fontsize=10];"]
    for i, blk in enumerate(genome.blocks):
        role = "encoder" if i < d else ("bottleneck" if i == d else "decoder")
        lines.append(f"  subgraph cluster_b{i} {{")
        lines.append(f'    label="block {i} ({role})";')
        lines.append(f'    b{i}_in [label="input", shape=ellipse];')
        lines.append(f'    b{i}_out [label="output", shape=ellipse];')
        for j, gene in enumerate(genome.op_genes(i), start=1):
            lines.append(f'    b{i}_n{j} [label="{j}: {gene.label()}"];')
        for p, q in blk.edges():
            lines.append(f"    b{i}_n{p} -> b{i}_n{q};")
        for j in range(1, blk.n_int + 1):
            if not blk.predecessors(j):
                lines.append(f"    b{i}_in -> b{i}_n{j} [style=dashed];")
            if not blk.successors(j):
                lines.append(f"    b{i}_n{j} -> b{i}_out [style=dashed];")
        lines.append("  }")
    lines.append("}")
    return "\n".join(lines) + "\n"


def internal_edge_count(dot: str, block: Optional[int] = None) -> int:
    """Count solid node-to-node edges in :func:`to_dot` output."""
    n = 0
    for line in dot.splitlines():
        line = line.strip()
        if "->" in line and "dashed" not in line:
            if block is None or line.startswith(f"b{block}_n"):
                n += 1
    return n
