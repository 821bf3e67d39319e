"""Bit-level genomes for U-shaped networks with per-node neuron types.

A genome holds ``2*depth + 1`` blocks (encoders, bottleneck, decoders). Each
block is a DAG over ``n_int`` intermediate nodes described by

* connection genes: for node ``i = 2..n_int`` a group of ``i - 1`` bits, the
  leftmost bit referring to node 1, so ``"1-00-110-0101"`` means node 2 <- 1,
  node 3 <- nothing, node 4 <- {1, 2}, node 5 <- {2, 4};
* operation genes, one per node. In joint mode a gene is 4 bits
  ``[kernel, activation, norm, neuron]`` (MSB first) and its display sequence
  number is ``value + 1``. Arch-only genes drop the neuron bit, neuron-only
  genes keep just it.

Text form: per block ``<conn groups>:<op genes>`` with both parts dash-joined,
blocks joined by ``/``.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

JOINT, ARCH, NEURON = "joint", "arch", "neuron"
OP_WIDTH = {JOINT: 4, ARCH: 3, NEURON: 1}
DEPTHS = (2, 3, 4)
DEFAULT_N_INT = 5


class GenomeError(ValueError):
    pass


class GenomeParseError(GenomeError):
    """Malformed genome text; ``offset`` is the character position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class OpGene:
    kernel_bit: int
    act_bit: int
    norm_bit: int
    neuron_bit: int

    @property
    def kernel(self) -> int:
        return 5 if self.kernel_bit else 3

    @property
    def post_activation(self) -> bool:
        return bool(self.act_bit)

    @property
    def instance_norm(self) -> bool:
        return bool(self.norm_bit)

    @property
    def quadratic(self) -> bool:
        return bool(self.neuron_bit)

    @property
    def value(self) -> int:
        return 8 * self.kernel_bit + 4 * self.act_bit + 2 * self.norm_bit + self.neuron_bit

    @property
    def sequence(self) -> int:
        return self.value + 1

    @property
    def bits(self) -> str:
        return format(self.value, "04b")

    @classmethod
    def from_value(cls, value: int) -> "OpGene":
        if not 0 <= value < 16:
            raise GenomeError(f"operation gene value {value} outside 0..15")
        return cls((value >> 3) & 1, (value >> 2) & 1, (value >> 1) & 1, value & 1)

    def label(self) -> str:
        k = f"{self.kernel}x{self.kernel}"
        conv = "QConv" if self.quadratic else "Conv"
        norm = "+IN" if self.instance_norm else ""
        order = "post" if self.post_activation else "pre"
        return f"{k}{conv}{norm}{order}"


def op_gene_from_sequence(seq: int) -> OpGene:
    if not 1 <= seq <= 16:
        raise GenomeError(f"sequence number {seq} outside 1..16")
    return OpGene.from_value(seq - 1)


def sequence_from_op_gene(gene: OpGene) -> int:
    return gene.sequence


@dataclass(frozen=True)
class ArchGene:
    kernel_bit: int
    act_bit: int
    norm_bit: int

    @property
    def value(self) -> int:
        return 4 * self.kernel_bit + 2 * self.act_bit + self.norm_bit

    @property
    def bits(self) -> str:
        return format(self.value, "03b")

    @classmethod
    def from_value(cls, value: int) -> "ArchGene":
        if not 0 <= value < 8:
            raise GenomeError(f"architecture gene value {value} outside 0..7")
        return cls((value >> 2) & 1, (value >> 1) & 1, value & 1)

    def with_neuron(self, neuron_bit: int) -> OpGene:
        return OpGene(self.kernel_bit, self.act_bit, self.norm_bit, neuron_bit)


def conn_length(n_int: int) -> int:
    return n_int * (n_int - 1) // 2


def bit_length(depth: int, n_int: int = DEFAULT_N_INT, mode: str = JOINT) -> int:
    return (2 * depth + 1) * (conn_length(n_int) + OP_WIDTH[mode] * n_int)


@dataclass(frozen=True)
class BlockGenome:
    """``conn[i-2]`` holds node ``i``'s predecessor bits; ``ops`` the gene values."""

    conn: Tuple[Tuple[int, ...], ...]
    ops: Tuple[int, ...]

    @property
    def n_int(self) -> int:
        return len(self.ops)

    def predecessors(self, node: int) -> List[int]:
        """1-based predecessors of 1-based ``node``."""
        if node == 1:
            return []
        return [j + 1 for j, b in enumerate(self.conn[node - 2]) if b]

    def edges(self) -> List[Tuple[int, int]]:
        return [(p, i) for i in range(2, self.n_int + 1) for p in self.predecessors(i)]

    def successors(self, node: int) -> List[int]:
        return [i for i in range(node + 1, self.n_int + 1) if self.conn[i - 2][node - 1]]

    def conn_text(self) -> str:
        return "-".join("".join(map(str, g)) for g in self.conn)


@dataclass(frozen=True)
class Genome:
    depth: int
    mode: str
    blocks: Tuple[BlockGenome, ...]

    def __post_init__(self):
        if self.mode not in OP_WIDTH:
            raise GenomeError(f"unknown mode {self.mode!r}")
        if len(self.blocks) != 2 * self.depth + 1:
            raise GenomeError(f"depth {self.depth} needs {2 * self.depth + 1} blocks, got {len(self.blocks)}")
        n = self.blocks[0].n_int
        limit = 1 << OP_WIDTH[self.mode]
        for blk in self.blocks:
            if blk.n_int != n or len(blk.conn) != n - 1:
                raise GenomeError("all blocks must share one intermediate-node count")
            for i, grp in enumerate(blk.conn):
                if len(grp) != i + 1 or any(b not in (0, 1) for b in grp):
                    raise GenomeError(f"bad connection group {grp!r} for node {i + 2}")
            if any(not 0 <= v < limit for v in blk.ops):
                raise GenomeError(f"operation gene out of range for mode {self.mode}")

    @property
    def n_int(self) -> int:
        return self.blocks[0].n_int

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def width(self) -> int:
        return OP_WIDTH[self.mode]

    def __len__(self) -> int:
        return bit_length(self.depth, self.n_int, self.mode)

    def __str__(self) -> str:
        return encode(self)

    def op_genes(self, block: int) -> List[OpGene]:
        if self.mode != JOINT:
            raise GenomeError("op_genes needs a joint-mode genome")
        return [OpGene.from_value(v) for v in self.blocks[block].ops]

    def bits(self) -> np.ndarray:
        out = []
        w = self.width
        for blk in self.blocks:
            for grp in blk.conn:
                out.extend(grp)
            for v in blk.ops:
                out.extend((v >> (w - 1 - s)) & 1 for s in range(w))
        return np.array(out, dtype=np.uint8)

    def block_slices(self) -> List[slice]:
        per = conn_length(self.n_int) + self.width * self.n_int
        return [slice(i * per, (i + 1) * per) for i in range(self.n_blocks)]

    def searchable_mask(self) -> np.ndarray:
        """Bits open to variation; neuron-only genomes keep their connections frozen."""
        mask = np.ones(len(self), dtype=bool)
        if self.mode == NEURON:
            c = conn_length(self.n_int)
            for s in self.block_slices():
                mask[s.start:s.start + c] = False
        return mask

    @classmethod
    def from_bits(cls, depth: int, n_int: int, mode: str, bits: Sequence[int]) -> "Genome":
        bits = [int(b) for b in bits]
        if len(bits) != bit_length(depth, n_int, mode):
            raise GenomeError(f"expected {bit_length(depth, n_int, mode)} bits, got {len(bits)}")
        w = OP_WIDTH[mode]
        pos = 0
        blocks = []
        for _ in range(2 * depth + 1):
            conn = []
            for i in range(1, n_int):
                conn.append(tuple(bits[pos:pos + i]))
                pos += i
            ops = []
            for _ in range(n_int):
                v = 0
                for b in bits[pos:pos + w]:
                    v = (v << 1) | b
                ops.append(v)
                pos += w
            blocks.append(BlockGenome(tuple(conn), tuple(ops)))
        return cls(depth, mode, tuple(blocks))

    def to_json(self) -> dict:
        w = self.width
        return {
            "depth": self.depth,
            "n_int": self.n_int,
            "mode": self.mode,
            "blocks": [
                {"conn": b.conn_text(), "ops": [format(v, f"0{w}b") for v in b.ops]} for b in self.blocks
            ],
        }

    @classmethod
    def from_json(cls, obj) -> "Genome":
        if isinstance(obj, str):
            obj = json.loads(obj)
        text = "/".join(f"{b['conn']}:{'-'.join(b['ops'])}" for b in obj["blocks"])
        g = decode(text, depth=obj.get("depth"))
        if g.mode != obj.get("mode", g.mode) or g.n_int != obj.get("n_int", g.n_int):
            raise GenomeError("JSON header disagrees with block contents")
        return g


# --------------------------------------------------------------------------
# text codec

def encode(genome: Genome) -> str:
    w = genome.width
    parts = []
    for b in genome.blocks:
        parts.append(b.conn_text() + ":" + "-".join(format(v, f"0{w}b") for v in b.ops))
    return "/".join(parts)


def _parse_bits(s: str, offset: int) -> Tuple[int, ...]:
    for i, ch in enumerate(s):
        if ch not in "01":
            raise GenomeParseError(f"non-binary character {ch!r}", offset + i)
    return tuple(int(c) for c in s)


def decode_connections(text: str, offset: int = 0) -> Tuple[Tuple[int, ...], ...]:
    """Parse one block's connection segment, e.g. ``"1-00-110-0101"``."""
    groups = text.split("-")
    out = []
    pos = offset
    for k, grp in enumerate(groups):
        if len(grp) != k + 1:
            raise GenomeParseError(
                f"connection group {k + 1} (node {k + 2}) must have {k + 1} bits, got {len(grp)}", pos
            )
        out.append(_parse_bits(grp, pos))
        pos += len(grp) + 1
    return tuple(out)


def decode(text: str, depth: Optional[int] = None) -> Genome:
    """Parse genome text; depth and mode are inferred from the layout."""
    text = text.strip()
    if not text:
        raise GenomeParseError("empty genome text", 0)
    blocks = []
    widths = set()
    pos = 0
    for seg in text.split("/"):
        if seg.count(":") != 1:
            raise GenomeParseError("block needs exactly one ':' between connections and operations", pos)
        conn_s, ops_s = seg.split(":")
        conn = decode_connections(conn_s, pos) if conn_s else ()
        opos = pos + len(conn_s) + 1
        ops = []
        for tok in ops_s.split("-"):
            if len(tok) not in (1, 3, 4):
                raise GenomeParseError(f"operation gene {tok!r} must have 1, 3 or 4 bits", opos)
            bits = _parse_bits(tok, opos)
            widths.add(len(tok))
            ops.append(int("".join(map(str, bits)), 2))
            opos += len(tok) + 1
        if len(ops) != len(conn) + 1:
            raise GenomeParseError(
                f"block has {len(conn)} connection groups but {len(ops)} operation genes", pos + len(conn_s) + 1
            )
        blocks.append(BlockGenome(conn, tuple(ops)))
        pos += len(seg) + 1
    if len(widths) != 1:
        raise GenomeParseError(f"mixed operation gene widths {sorted(widths)}", 0)
    mode = {4: JOINT, 3: ARCH, 1: NEURON}[widths.pop()]
    nb = len(blocks)
    if nb % 2 == 0 or (nb - 1) // 2 not in DEPTHS:
        raise GenomeParseError(f"{nb} blocks do not match any depth in {DEPTHS} (need 5, 7 or 9)", len(text))
    if depth is not None and nb != 2 * depth + 1:
        raise GenomeParseError(f"depth {depth} needs {2 * depth + 1} blocks, got {nb}", len(text))
    if len({b.n_int for b in blocks}) != 1:
        raise GenomeParseError("blocks disagree on the number of intermediate nodes", 0)
    return Genome((nb - 1) // 2, mode, tuple(blocks))


# --------------------------------------------------------------------------
# sampling and variation

def random_genome(
    rng: np.random.Generator, depth: int, n_int: int = DEFAULT_N_INT, mode: str = JOINT
) -> Genome:
    bits = rng.integers(0, 2, size=bit_length(depth, n_int, mode))
    return Genome.from_bits(depth, n_int, mode, bits)


def _aligned(a: Genome, b: Genome) -> None:
    if (a.depth, a.n_int, a.mode) != (b.depth, b.n_int, b.mode):
        raise GenomeError(
            f"genomes differ in shape: {(a.depth, a.n_int, a.mode)} vs {(b.depth, b.n_int, b.mode)}"
        )


def hamming(a: Genome, b: Genome) -> int:
    _aligned(a, b)
    return int(np.count_nonzero(a.bits() != b.bits()))


def crossover(a: Genome, b: Genome, rng: np.random.Generator, p: float = 0.9) -> Tuple[Genome, Genome]:
    """Two-point crossover on the searchable bits with probability ``p``."""
    _aligned(a, b)
    if rng.random() >= p:
        return a, b
    ba, bb = a.bits(), b.bits()
    idx = np.flatnonzero(a.searchable_mask())
    n = len(idx)
    if n < 3:
        return a, b
    c1, c2 = sorted(rng.choice(np.arange(1, n), size=2, replace=False))
    seg = idx[c1:c2]
    ca, cb = ba.copy(), bb.copy()
    ca[seg], cb[seg] = bb[seg], ba[seg]
    return (Genome.from_bits(a.depth, a.n_int, a.mode, ca), Genome.from_bits(a.depth, a.n_int, a.mode, cb))


def mutate(g: Genome, rng: np.random.Generator, p: float = 0.7, p_bit: float = 0.5) -> Genome:
    """With probability ``p`` pick one block and flip each of its searchable bits w.p. ``p_bit``."""
    if rng.random() >= p:
        return g
    blk = int(rng.integers(g.n_blocks))
    s = g.block_slices()[blk]
    bits = g.bits()
    mask = g.searchable_mask()[s]
    flips = (rng.random(s.stop - s.start) < p_bit) & mask
    bits[s] ^= flips.astype(np.uint8)
    return Genome.from_bits(g.depth, g.n_int, g.mode, bits)


# --------------------------------------------------------------------------
# plug-and-play split

def split_plugplay(g: Genome) -> Tuple[Genome, Genome]:
    """Joint genome -> (arch-only genome, neuron-only genome) sharing connections."""
    if g.mode != JOINT:
        raise GenomeError(f"split needs a joint genome, got mode {g.mode!r}")
    arch = tuple(BlockGenome(b.conn, tuple(v >> 1 for v in b.ops)) for b in g.blocks)
    neuron = tuple(BlockGenome(b.conn, tuple(v & 1 for v in b.ops)) for b in g.blocks)
    return Genome(g.depth, ARCH, arch), Genome(g.depth, NEURON, neuron)


def merge_plugplay(arch: Genome, neuron: Genome) -> Genome:
    if arch.mode != ARCH or neuron.mode != NEURON:
        raise GenomeError(f"merge needs (arch, neuron) genomes, got ({arch.mode}, {neuron.mode})")
    if arch.depth != neuron.depth or arch.n_int != neuron.n_int:
        raise GenomeError("arch and neuron genomes differ in shape")
    blocks = []
    for ba, bn in zip(arch.blocks, neuron.blocks):
        if ba.conn != bn.conn:
            raise GenomeError("arch and neuron genomes disagree on connections")
        blocks.append(BlockGenome(ba.conn, tuple((va << 1) | vn for va, vn in zip(ba.ops, bn.ops))))
    return Genome(arch.depth, JOINT, tuple(blocks))


def as_joint(g: Genome, neuron_bit: int = 0) -> Genome:
    """Joint view of any genome; arch-only genomes get a uniform neuron bit."""
    if g.mode == JOINT:
        return g
    if g.mode == ARCH:
        blocks = tuple(BlockGenome(b.conn, tuple((v << 1) | neuron_bit for v in b.ops)) for b in g.blocks)
        return Genome(g.depth, JOINT, blocks)
    raise GenomeError("a neuron-only genome needs its architecture; use merge_plugplay")


def with_neuron_type(g: Genome, neuron_bit: int) -> Genome:
    """Homogeneous twin: every node switched to one neuron type."""
    g = as_joint(g)
    blocks = tuple(BlockGenome(b.conn, tuple((v & ~1) | neuron_bit for v in b.ops)) for b in g.blocks)
    return Genome(g.depth, JOINT, blocks)


# --------------------------------------------------------------------------
# per-block summaries ("16-3-13-12-9-14-13")

def block_summary(block: BlockGenome) -> int:
    """Majority sequence number of a joint block; ties go to the lower number."""
    counts = Counter(v + 1 for v in block.ops)
    best = max(counts.values())
    return min(s for s, c in counts.items() if c == best)


def summary_string(g: Genome) -> str:
    g = as_joint(g)
    return "-".join(str(block_summary(b)) for b in g.blocks)


def chain_connections(n_int: int) -> Tuple[Tuple[int, ...], ...]:
    """Each node fed by its immediate predecessor: ``1-01-001-0001`` for 5 nodes."""
    return tuple(tuple(1 if j == i else 0 for j in range(i + 1)) for i in range(n_int - 1))


def from_summary(summary: str, n_int: int = DEFAULT_N_INT, conn=None) -> Genome:
    """Expand a per-block summary: every node of block ``i`` gets sequence ``s_i``.

    Connections default to a simple chain.
    """
    try:
        seqs = [int(s) for s in summary.strip().split("-")]
    except ValueError as exc:
        raise GenomeError(f"bad summary string {summary!r}") from exc
    if len(seqs) % 2 == 0 or (len(seqs) - 1) // 2 not in DEPTHS:
        raise GenomeError(f"summary {summary!r} has {len(seqs)} entries; need 5, 7 or 9")
    conn = chain_connections(n_int) if conn is None else conn
    blocks = tuple(BlockGenome(conn, (op_gene_from_sequence(s).value,) * n_int) for s in seqs)
    return Genome((len(seqs) - 1) // 2, JOINT, blocks)


def plain_unet_genome(depth: int, n_int: int = DEFAULT_N_INT) -> Genome:
    """Fixed homogeneous comparator: chained 3x3 Conv->IN->ReLU nodes (sequence 7)."""
    return from_summary("-".join(["7"] * (2 * depth + 1)), n_int=n_int)


def sequence_counts(genomes: Iterable[Genome]) -> Counter:
    counts: Counter = Counter()
    for g in genomes:
        for b in as_joint(g).blocks:
            counts.update(v + 1 for v in b.ops)
    return counts
