"""Genetic search over genomes: joint and plug-and-play neuron programming.

Each generation draws N/2 parent pairs by binary tournament, applies two-point
crossover and single-block mutation, evaluates the N offspring, and keeps the
best N of the merged pool (incumbents first on ties). Offspring identical to a
genome already in the pool are dropped before the merge, so clones never push
out distinct incumbents.

Every evaluation request is appended to an append-only JSON-lines archive,
including cache hits. Resuming replays the archive record by record: the
search is re-run with stored fitness values in place of training, which
restores the rng state exactly, and then continues.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from itertools import combinations
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .genome import (
    ARCH,
    DEFAULT_N_INT,
    JOINT,
    NEURON,
    BlockGenome,
    Genome,
    as_joint,
    crossover,
    decode,
    encode,
    hamming,
    merge_plugplay,
    mutate,
    random_genome,
)
from .netbuilder import param_count
from .seeds import derive_seed

log = logging.getLogger(__name__)

TIE_TOL = 1e-6


class SearchError(RuntimeError):
    pass


class ResumeError(SearchError):
    pass


@dataclass
class SearchConfig:
    population: int = 20
    generations: int = 50
    p_cross: float = 0.9
    p_mut: float = 0.7
    p_bitflip: float = 0.5
    mode: str = JOINT
    depth: int = 2
    n_int: int = DEFAULT_N_INT
    base_channels: int = 8
    epochs: int = 20
    base_seed: int = 0
    run_id: str = "run"
    record_wall_time: bool = False

    def __post_init__(self):
        for name in ("p_cross", "p_mut", "p_bitflip"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.population < 4 or self.population % 2:
            raise ValueError(f"population must be even and >= 4, got {self.population}")
        if self.generations < 0:
            raise ValueError("generations must be >= 0")
        if self.mode not in (JOINT, "plugplay"):
            raise ValueError(f"mode must be joint or plugplay, got {self.mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EvalResult:
    fitness: float
    metrics: dict = field(default_factory=dict)
    params: int = 0
    epochs: int = 0
    failed: bool = False


@dataclass
class Individual:
    genome: Genome
    fitness: Optional[float] = None
    metrics: dict = field(default_factory=dict)
    seed: Optional[int] = None
    params: int = 0
    cached: bool = False

    @property
    def text(self) -> str:
        return encode(self.genome)


@dataclass
class ArchiveRecord:
    run_id: str
    depth: int
    base_channels: int
    genome: str
    fitness: float
    metrics: dict
    params: int
    seed: int
    generation: int
    timestamp: Optional[float] = None
    phase: str = JOINT
    search_genome: str = ""
    cached: bool = False
    epochs: int = 0

    def to_line(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, allow_nan=False)

    @classmethod
    def from_line(cls, line: str) -> "ArchiveRecord":
        obj = json.loads(line)
        known = {f.name for f in fields(cls)}
        rec = cls(**{k: v for k, v in obj.items() if k in known})
        decode(rec.genome)
        return rec


def read_archive(path) -> List[ArchiveRecord]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(ArchiveRecord.from_line(line))
                except (ValueError, TypeError) as exc:
                    raise SearchError(f"{path}:{n}: bad archive record: {exc}") from exc
    return out


class Archive:
    """Append-only record log; optionally mirrored to a JSON-lines file.

    Records already present (from an interrupted run) form a replay queue that
    is consumed before any new evaluation happens.
    """

    def __init__(self, path=None, resume: bool = False):
        self.path = Path(path) if path is not None else None
        self.records: List[ArchiveRecord] = []
        self._replay: List[ArchiveRecord] = []
        if self.path is not None and self.path.exists() and self.path.stat().st_size:
            if not resume:
                raise SearchError(f"archive {self.path} already exists (resume to continue it)")
            self._replay = read_archive(self.path)
            log.info("resuming: %d archived evaluations to replay", len(self._replay))
        elif self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    @property
    def replaying(self) -> bool:
        return len(self.records) < len(self._replay)

    def append(self, rec: ArchiveRecord) -> None:
        replayed = self.replaying
        self.records.append(rec)
        if self.path is not None and not replayed:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(rec.to_line() + "\n")
                fh.flush()


# --------------------------------------------------------------------------
# evaluators

def _clean(d: dict) -> dict:
    return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in d.items()}


class TrainingEvaluator:
    """Short-budget training on a fixed train/validation split."""

    def __init__(self, data, train_cfg):
        self.data = data
        self.cfg = train_cfg

    def __call__(self, genome: Genome, seed: int) -> EvalResult:
        from .segtrain.train import train_candidate

        r = train_candidate(genome, self.data, self.cfg, seed)
        row = r.metrics.as_row()
        return EvalResult(r.fitness, _clean(row), r.network.num_parameters(), self.cfg.epochs, r.diverged)


def quad_fraction(genome: Genome) -> float:
    """Surrogate fitness: fraction of nodes with quadratic neurons."""
    g = as_joint(genome)
    vals = [v & 1 for b in g.blocks for v in b.ops]
    return float(np.mean(vals))


def ones_fraction(genome: Genome) -> float:
    """Surrogate fitness: fraction of set bits in the joint encoding."""
    return float(np.mean(as_joint(genome).bits()))


SURROGATES = {"quad_fraction": quad_fraction, "ones_fraction": ones_fraction}


class SurrogateEvaluator:
    """Instant fitness from a pure function of the genome (for testing the GA)."""

    def __init__(self, fn="quad_fraction", base_channels: int = 8):
        self.fn = SURROGATES[fn] if isinstance(fn, str) else fn
        self.base_channels = base_channels

    def __call__(self, genome: Genome, seed: int) -> EvalResult:
        f = float(self.fn(genome))
        return EvalResult(f, {"f1": f}, param_count(genome, self.base_channels), 0)


def _safe_call(evaluator, genome: Genome, seed: int) -> EvalResult:
    try:
        res = evaluator(genome, seed)
        if not (0.0 <= res.fitness <= 1.0) or math.isnan(res.fitness):
            raise SearchError(f"fitness {res.fitness} outside [0, 1]")
        return res
    except Exception as exc:  # a failing candidate must not stop the search
        log.warning("evaluation failed for %s: %s: %s", encode(genome), type(exc).__name__, exc)
        return EvalResult(0.0, {"error": f"{type(exc).__name__}: {exc}"}, 0, 0, True)


def _pool_task(args):
    evaluator, text, seed = args
    return _safe_call(evaluator, decode(text), seed)


# --------------------------------------------------------------------------
# search spaces

@dataclass
class Space:
    """A genome family plus its mapping to buildable joint genomes."""

    mode: str
    depth: int
    n_int: int
    phenotype: Callable[[Genome], Genome]
    conn: Optional[Tuple] = None

    def random(self, rng: np.random.Generator) -> Genome:
        g = random_genome(rng, self.depth, self.n_int, self.mode)
        if self.conn is not None:
            g = Genome(g.depth, g.mode, tuple(BlockGenome(c, b.ops) for c, b in zip(self.conn, g.blocks)))
        return g


def joint_space(depth: int, n_int: int = DEFAULT_N_INT) -> Space:
    return Space(JOINT, depth, n_int, lambda g: g)


def arch_space(depth: int, n_int: int = DEFAULT_N_INT) -> Space:
    return Space(ARCH, depth, n_int, lambda g: as_joint(g, 0))


class _Merge:
    def __init__(self, arch: Genome):
        self.arch = arch

    def __call__(self, g: Genome) -> Genome:
        return merge_plugplay(self.arch, g)


def neuron_space(arch: Genome) -> Space:
    """Neuron-only genomes on a frozen architecture."""
    return Space(NEURON, arch.depth, arch.n_int, _Merge(arch), tuple(b.conn for b in arch.blocks))


def neuron_assignment(arch: Genome, bit: int) -> Genome:
    blocks = tuple(BlockGenome(b.conn, (bit,) * len(b.ops)) for b in arch.blocks)
    return Genome(arch.depth, NEURON, blocks)


# --------------------------------------------------------------------------
# evaluation bookkeeping

class Engine:
    """Evaluates batches of search genomes with caching, archiving and replay."""

    def __init__(self, cfg: SearchConfig, evaluator, archive: Archive, workers: int = 1):
        self.cfg = cfg
        self.evaluator = evaluator
        self.archive = archive
        self.workers = workers
        self.cache: Dict[Tuple[str, int], EvalResult] = {}
        self.evaluations = 0
        self.trainings = 0
        self.epochs = 0
        self._pool = None

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def _run(self, jobs: List[Tuple[Genome, int]]) -> List[EvalResult]:
        if self.workers <= 1 or len(jobs) <= 1:
            return [_safe_call(self.evaluator, g, s) for g, s in jobs]
        if self._pool is None:
            self._pool = ProcessPoolExecutor(max_workers=self.workers)
        return list(self._pool.map(_pool_task, [(self.evaluator, encode(g), s) for g, s in jobs]))

    def evaluate(self, genomes: Sequence[Genome], space: Space, generation: int, phase: str) -> List[Individual]:
        cfg = self.cfg
        plan = []
        pending: Dict[Tuple[str, int], Genome] = {}
        replay_results: Dict[Tuple[str, int], ArchiveRecord] = {}
        for k, g in enumerate(genomes):
            joint = space.phenotype(g)
            text = encode(joint)
            seed = derive_seed(cfg.base_seed, "eval", text)
            key = (text, seed)
            rec = self.archive._replay[len(self.archive.records) + k] if (
                len(self.archive.records) + k < len(self.archive._replay)
            ) else None
            if rec is not None:
                if rec.genome != text or rec.generation != generation or rec.phase != phase:
                    raise ResumeError(
                        f"archive diverges from the replayed search at record {len(self.archive.records) + k}: "
                        f"expected {text} (gen {generation}), found {rec.genome} (gen {rec.generation})"
                    )
                if key not in self.cache and key not in replay_results and not rec.cached:
                    replay_results[key] = rec
            elif key not in self.cache and key not in pending and key not in replay_results:
                pending[key] = joint
            plan.append((g, joint, text, seed, key))

        fresh = dict(zip(pending, self._run([(j, k[1]) for k, j in pending.items()])))
        for key, rec in replay_results.items():
            fresh[key] = EvalResult(rec.fitness, rec.metrics, rec.params, rec.epochs, "error" in rec.metrics)

        out = []
        for g, joint, text, seed, key in plan:
            cached = key in self.cache
            if cached:
                res = self.cache[key]
            else:
                res = fresh[key]
                self.cache[key] = res
                self.trainings += 1
                self.epochs += res.epochs
            self.evaluations += 1
            self.archive.append(
                ArchiveRecord(
                    run_id=cfg.run_id,
                    depth=joint.depth,
                    base_channels=cfg.base_channels,
                    genome=text,
                    fitness=float(res.fitness),
                    metrics=res.metrics,
                    params=int(res.params),
                    seed=int(seed),
                    generation=generation,
                    timestamp=time.time() if cfg.record_wall_time else None,
                    phase=phase,
                    search_genome=encode(g),
                    cached=cached,
                    epochs=0 if cached else res.epochs,
                )
            )
            out.append(Individual(g, float(res.fitness), res.metrics, seed, int(res.params), cached))
        return out


# --------------------------------------------------------------------------
# GA operators

def init_population(cfg: SearchConfig, rng: np.random.Generator, space: Optional[Space] = None, n: Optional[int] = None):
    """``n`` (default N) random genomes; duplicates are re-drawn up to 100 times."""
    space = space or joint_space(cfg.depth, cfg.n_int)
    n = cfg.population if n is None else n
    pop: List[Genome] = []
    seen = set()
    for _ in range(n):
        g = space.random(rng)
        tries = 0
        while encode(g) in seen and tries < 100:
            g = space.random(rng)
            tries += 1
        seen.add(encode(g))
        pop.append(g)
    return pop


def _better(a: Individual, b: Individual) -> Individual:
    if abs(a.fitness - b.fitness) > TIE_TOL:
        return a if a.fitness > b.fitness else b
    return a if a.text <= b.text else b


def select_parents(pop: Sequence[Individual], rng: np.random.Generator) -> Tuple[Individual, Individual]:
    """Two binary tournaments; the second breaks fitness ties by Hamming distance to the first winner."""
    if any(ind.fitness is None for ind in pop):
        raise SearchError("select_parents needs an evaluated population")
    i, j = rng.integers(len(pop), size=2)
    p1 = _better(pop[i], pop[j])
    a, b = (pop[k] for k in rng.integers(len(pop), size=2))
    if abs(a.fitness - b.fitness) > TIE_TOL:
        p2 = a if a.fitness > b.fitness else b
    else:
        da, db = hamming(a.genome, p1.genome), hamming(b.genome, p1.genome)
        if da != db:
            p2 = a if da > db else b
        else:
            p2 = a if a.text <= b.text else b
    return p1, p2


def make_offspring(pop: Sequence[Individual], cfg: SearchConfig, rng: np.random.Generator, n: int) -> List[Genome]:
    kids: List[Genome] = []
    for _ in range(n // 2):
        p1, p2 = select_parents(pop, rng)
        c1, c2 = crossover(p1.genome, p2.genome, rng, cfg.p_cross)
        kids.append(mutate(c1, rng, cfg.p_mut, cfg.p_bitflip))
        kids.append(mutate(c2, rng, cfg.p_mut, cfg.p_bitflip))
    return kids


def replace_worst(pop: Sequence[Individual], offspring: Sequence[Individual], n: int) -> List[Individual]:
    """Merge, drop offspring that duplicate a pooled genome, keep the best ``n``."""
    seen = {ind.text for ind in pop}
    merged = list(pop)
    for ind in offspring:
        if ind.text not in seen:
            seen.add(ind.text)
            merged.append(ind)
    order = sorted(range(len(merged)), key=lambda k: -merged[k].fitness)
    return [merged[k] for k in order[:n]]


def step_generation(pop: Sequence[Individual], cfg: SearchConfig, rng: np.random.Generator, evaluate) -> List[Individual]:
    """One generation. ``evaluate`` maps a list of genomes to evaluated Individuals."""
    kids = make_offspring(pop, cfg, rng, len(pop))
    return replace_worst(pop, evaluate(kids), len(pop))


def batch_evaluator(fn: Callable[[Genome], float]):
    """Wrap a plain fitness function as an ``evaluate`` callable for :func:`step_generation`."""
    return lambda genomes: [Individual(g, float(fn(g))) for g in genomes]


def diversity(pop: Sequence[Individual]) -> float:
    pairs = list(combinations(pop, 2))
    if not pairs:
        return 0.0
    return float(np.mean([hamming(a.genome, b.genome) for a, b in pairs]))


def best_individual(inds: Sequence[Individual]) -> Individual:
    """Highest fitness; ties go to fewer parameters, then the lexicographically smaller genome."""
    return min(inds, key=lambda i: (-i.fitness, i.params, i.text))


# --------------------------------------------------------------------------
# drivers

@dataclass
class SearchResult:
    best: Individual
    best_joint: Genome
    archive: List[ArchiveRecord]
    history: List[dict]
    cost: dict
    phases: List[dict] = field(default_factory=list)


def _history_row(gen: int, pop: Sequence[Individual], engine: Engine, phase: str) -> dict:
    fits = [i.fitness for i in pop]
    return {
        "phase": phase,
        "gen": gen,
        "best_f1": max(fits),
        "mean_f1": float(np.mean(fits)),
        "diversity": diversity(pop),
        "evaluations": engine.evaluations,
        "trainings": engine.trainings,
        "epochs": engine.epochs,
    }


def _evolve(cfg, engine, space, n, generations, rng, phase, history, initial=None):
    genomes = initial if initial is not None else init_population(cfg, rng, space, n)
    pop = engine.evaluate(genomes, space, 0, phase)
    history.append(_history_row(0, pop, engine, phase))
    log.info("%s gen 0: best %.4f", phase, history[-1]["best_f1"])
    for gen in range(1, generations + 1):
        kids = make_offspring(pop, cfg, rng, n)
        pop = replace_worst(pop, engine.evaluate(kids, space, gen, phase), n)
        history.append(_history_row(gen, pop, engine, phase))
        log.info("%s gen %d: best %.4f mean %.4f", phase, gen, history[-1]["best_f1"], history[-1]["mean_f1"])
    return pop


def _cost(engine: Engine) -> dict:
    return {"evaluations": engine.evaluations, "trainings": engine.trainings, "epochs": engine.epochs}


def run_search(cfg: SearchConfig, evaluator, archive_path=None, resume: bool = False, workers: int = 1) -> SearchResult:
    """Joint search over connection and operation genes."""
    archive = Archive(archive_path, resume)
    engine = Engine(cfg, evaluator, archive, workers)
    rng = np.random.default_rng(derive_seed(cfg.base_seed, "search", JOINT))
    space = joint_space(cfg.depth, cfg.n_int)
    history: List[dict] = []
    try:
        pop = _evolve(cfg, engine, space, cfg.population, cfg.generations, rng, JOINT, history)
    finally:
        engine.close()
    best = best_individual(pop)
    return SearchResult(best, best.genome, archive.records, history, _cost(engine))


def plugplay_budget(n: int, t: int) -> Tuple[int, int, int]:
    """(phase-1 generations, phase-2 population, phase-2 generations) for a matched (N, T)."""
    t1 = math.ceil(t / 2)
    n2 = max(4, 2 * (n // 4))
    return t1, n2, t - t1


def run_plugplay(cfg: SearchConfig, evaluator, archive_path=None, resume: bool = False, workers: int = 1) -> SearchResult:
    """Structure first (arch-only genomes, conventional neurons), then neuron types on the frozen winner."""
    archive = Archive(archive_path, resume)
    engine = Engine(cfg, evaluator, archive, workers)
    t1, n2, t2 = plugplay_budget(cfg.population, cfg.generations)
    history: List[dict] = []
    phases = []
    try:
        rng1 = np.random.default_rng(derive_seed(cfg.base_seed, "search", "arch"))
        pop1 = _evolve(cfg, engine, arch_space(cfg.depth, cfg.n_int), cfg.population, t1, rng1, ARCH, history)
        arch_best = best_individual(pop1)
        phases.append({"phase": ARCH, "best": arch_best.fitness, **_cost(engine)})

        rng2 = np.random.default_rng(derive_seed(cfg.base_seed, "search", "neuron"))
        space2 = neuron_space(arch_best.genome)
        initial = [neuron_assignment(arch_best.genome, 0)] + init_population(cfg, rng2, space2, n2 - 1)
        before = _cost(engine)
        pop2 = _evolve(cfg, engine, space2, n2, t2, rng2, NEURON, history, initial)
        after = _cost(engine)
        phases.append({"phase": NEURON, "best": best_individual(pop2).fitness,
                       **{k: after[k] - before[k] for k in after}})
    finally:
        engine.close()
    best = best_individual(pop2)
    return SearchResult(best, space2.phenotype(best.genome), archive.records, history, _cost(engine), phases)


def expected_evaluations(cfg: SearchConfig) -> int:
    """Archive rows a full run produces: N + N*T (joint) or the two-phase equivalent."""
    n, t = cfg.population, cfg.generations
    if cfg.mode == JOINT:
        return n + n * t
    t1, n2, t2 = plugplay_budget(n, t)
    return n + n * t1 + n2 + n2 * t2


def write_history_csv(history: Sequence[dict], path) -> Path:
    path = Path(path)
    cols = ["phase", "gen", "best_f1", "mean_f1", "diversity", "evaluations", "trainings", "epochs"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (f"{row[k]:.6f}" if isinstance(row[k], float) else row[k]) for k in cols})
    return path
