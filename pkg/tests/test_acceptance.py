"""End-to-end acceptance checks, one PASS/FAIL line per criterion.

Run with ``pytest -v tests/test_acceptance.py``; the desk search (criteria 6
and 7) dominates the runtime.
"""

import hashlib
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

from fdcheck import check
from neuroprog import evolution as E
from neuroprog import genome as G
from neuroprog import hypernet as H
from neuroprog import tensor as T
from neuroprog.cli import main
from neuroprog.layers import QuadNeuronLayer, quad_forward
from neuroprog.netbuilder import build
from neuroprog.segtrain import losses as Lo
from neuroprog.segtrain import metrics as M
from neuroprog.segtrain.data import synth_vessels
from neuroprog.segtrain.train import TrainConfig, train_candidate
from neuroprog.tensor import Tensor

DESK_SEEDS = (0, 1, 2)
DESK_N, DESK_T = 8, 10


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\nCRITERION {n} {'PASS' if ok else 'FAIL'}: {detail}")


def digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def tree_digest(root: Path) -> dict:
    return {str(p.relative_to(root)): digest(p) for p in sorted(root.rglob("*")) if p.is_file()}


def desk_data():
    return synth_vessels(64, 32, rng=1)


# --------------------------------------------------------------------------
# 1. gradients

def _leaf(rng, *shape, lo=None, hi=None):
    if lo is None:
        return Tensor(rng.normal(size=shape), requires_grad=True)
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _proj(out, seed):
    # a fixed random projection so every output element carries a distinct weight
    return T.tensor_sum(T.hadamard(out, Tensor(np.random.default_rng(seed).normal(size=out.shape))))


def _grad_cases(rng):
    """Yield (name, build, leaves) for one random configuration of every op and loss."""
    b, c, o = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    hw = 2 * int(rng.integers(2, 4))
    k = int(rng.choice([1, 3, 5]))
    x = _leaf(rng, b, c, hw, hw)
    w, bias = _leaf(rng, o, c, k, k), _leaf(rng, o)
    yield "conv2d", lambda: _proj(T.conv2d(x, w, bias), 1), [x, w, bias]

    q = [_leaf(rng, o, c, k, k) if i % 2 == 0 else _leaf(rng, o) for i in range(6)]
    yield "quadconv2d", lambda: _proj(T.quadconv2d(x, *q), 2), [x, *q]

    layer = QuadNeuronLayer(c, o, k, rng=rng)
    lp = list(layer.params().values())
    for t in lp:  # move off the linear start so every branch carries gradient
        t.data += rng.normal(scale=0.3, size=t.data.shape)
    yield "quad_layer", lambda: _proj(quad_forward(x, layer), 3), [x, *lp]

    yield "instance_norm", lambda: _proj(T.instance_norm(x), 4), [x]
    xs = Tensor(x.data + 0.05 * np.sign(x.data) + 1e-3, requires_grad=True)  # keep away from the ReLU kink
    yield "relu", lambda: _proj(T.relu(xs), 5), [xs]
    yield "sigmoid", lambda: _proj(T.sigmoid(x), 6), [x]
    y = _leaf(rng, b, c, hw, hw)
    yield "hadamard", lambda: T.tensor_sum(T.hadamard(x, y)), [x, y]
    yield "add_n", lambda: _proj(T.add_n([x, y, x]), 7), [x, y]
    yield "maxpool", lambda: _proj(T.maxpool2x2(x), 8), [x]
    yield "upsample", lambda: _proj(T.upsample_nearest2x(x), 9), [x]
    v, lw, lb = _leaf(rng, b, 3), _leaf(rng, 3, 4), _leaf(rng, 4)
    yield "linear", lambda: _proj(T.linear(v, lw, lb), 10), [v, lw, lb]

    p = _leaf(rng, b, 1, hw, hw, lo=0.05, hi=0.95)
    tgt = (rng.random((b, 1, hw, hw)) < 0.3).astype(float)
    alpha, omega = float(rng.uniform(0.2, 0.9)), float(rng.choice([0.0, 1.0, 2.0, 2.5]))
    yield "focal", lambda: Lo.focal_loss(p, tgt, Lo.FocalParams(alpha, omega)), [p]
    yield "bce", lambda: Lo.bce_loss(p, tgt), [p]
    yield "dice", lambda: Lo.dice_loss(p, tgt), [p]
    yield "jaccard", lambda: Lo.jaccard_loss(p, tgt), [p]

    logits = _leaf(rng, 2, 6 * H.N_CLASSES)
    ops = rng.integers(0, H.N_CLASSES, size=(2, 6))
    mask = rng.random((2, 6)) < 0.7
    yield "masked_ce", lambda: H.masked_softmax_ce(logits, ops, mask), [logits]
    cl = _leaf(rng, 2, 10)
    bits = (rng.random((2, 10)) < 0.5).astype(float)
    bmask = rng.random((2, 10)) < 0.7
    yield "masked_bce", lambda: H.masked_bce_logits(cl, bits, bmask), [cl]


def test_criterion_1_gradient_suite(f64, capsys):
    t0 = time.perf_counter()
    worst, configs, names = 0.0, 0, set()
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        for name, fn, leaves in _grad_cases(rng):
            err = check(fn, leaves, h=1e-5)
            worst = max(worst, err)
            configs += 1
            names.add(name)
    # a whole network, end to end through the segmentation loss
    g = G.random_genome(np.random.default_rng(42), 2)
    net = build(g, 2, rng=0)
    x = Tensor(np.random.default_rng(43).normal(size=(1, 1, 8, 8)))
    y = (np.random.default_rng(44).random((1, 1, 8, 8)) < 0.3).astype(float)
    params = [t for _, t in net.named_parameters()][:6]
    worst = max(worst, check(lambda: Lo.focal_loss(net(x), y), params, h=1e-5))
    dt = time.perf_counter() - t0
    ok = worst < 1e-4 and configs >= 20 and dt < 120
    report(capsys, 1, ok, f"{configs} configs over {len(names)} ops/losses, worst rel err {worst:.2e} "
                          f"(< 1e-4), {dt:.1f} s (< 120 s)")
    assert ok


# --------------------------------------------------------------------------
# 2. ReLinear equivalence

def test_criterion_2_relinear_equivalence(f64, capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for i in range(20):
        g = G.random_genome(rng, int(rng.choice(G.DEPTHS)))
        quad = build(G.with_neuron_type(g, 1), 4, rng=i)
        conv = build(G.with_neuron_type(g, 0), 4, rng=i)
        side = 2 ** g.depth * int(rng.integers(1, 3))
        x = Tensor(rng.normal(size=(2, 1, side, side)))
        worst = max(worst, float(np.abs(quad(x).data - conv(x).data).max()))
    dt = time.perf_counter() - t0
    ok = worst < 1e-6 and dt < 60
    report(capsys, 2, ok, f"20 genomes, max abs diff {worst:.2e} (< 1e-6), {dt:.1f} s (< 60 s)")
    assert ok


# --------------------------------------------------------------------------
# 3. codec

def test_criterion_3_codec(capsys):
    from test_genome import WORKED_ADJ, OP_TABLE, TWO_STEP_TABLE, row_of

    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    bad = 0
    for mode in (G.JOINT, G.ARCH, G.NEURON):
        for _ in range(1000):
            g = G.random_genome(rng, int(rng.choice(G.DEPTHS)), mode=mode)
            text = G.encode(g)
            bad += G.decode(text) != g or G.encode(G.decode(text)) != text
    blk = G.BlockGenome(G.decode_connections("1-00-110-0101"), (0,) * 5)
    worked = {i: blk.predecessors(i) for i in range(2, 6)} == WORKED_ADJ
    t1 = [row_of(G.op_gene_from_sequence(s)) for s in range(1, 17)] == OP_TABLE
    rows = []
    for v in range(8):
        a = G.ArchGene.from_value(v)
        pair = (a.with_neuron(0), a.with_neuron(1))
        rows.append((pair[0].kernel, "post" if pair[0].post_activation else "pre",
                     "IN" if pair[0].instance_norm else "-", a.bits,
                     tuple(p.bits for p in pair), tuple(p.sequence for p in pair)))
    t2 = rows == TWO_STEP_TABLE
    dt = time.perf_counter() - t0
    ok = bad == 0 and worked and t1 and t2 and dt < 10
    report(capsys, 3, ok, f"3x1000 roundtrips, {bad} failures; worked example {worked}; op table {t1}; "
                          f"two-step table {t2}; {dt:.1f} s (< 10 s)")
    assert ok


# --------------------------------------------------------------------------
# 4. GA properties

def test_criterion_4_ga_properties(tmp_path, capsys):
    t0 = time.perf_counter()
    cfg = E.SearchConfig(population=20, generations=50, depth=2, base_seed=4, run_id="acc")
    res = E.run_search(cfg, E.SurrogateEvaluator("ones_fraction"), archive_path=tmp_path / "a.jsonl")
    E.run_search(cfg, E.SurrogateEvaluator("ones_fraction"), archive_path=tmp_path / "b.jsonl")
    best = [h["best_f1"] for h in res.history]
    monotone = all(b2 >= b1 for b1, b2 in zip(best, best[1:])) and len(best) == 51
    rows = E.read_archive(tmp_path / "a.jsonl")
    per_gen = {}
    for r in rows:
        per_gen[r.generation] = per_gen.get(r.generation, 0) + 1
    size_ok = set(per_gen.values()) == {cfg.population} and len(per_gen) == 51
    same = (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    count_ok = len(rows) == E.expected_evaluations(cfg) == 20 + 20 * 50

    pcfg = E.SearchConfig(population=20, generations=50, depth=2, base_seed=4, run_id="acc", mode="plugplay")
    pres = E.run_plugplay(pcfg, E.SurrogateEvaluator("ones_fraction"), archive_path=tmp_path / "p.jsonl")
    pbest = [h["best_f1"] for h in pres.history]
    t1 = E.plugplay_budget(20, 50)[0] + 1
    pmono = all(b >= a for seg in (pbest[:t1], pbest[t1:]) for a, b in zip(seg, seg[1:]))
    pcount = len(E.read_archive(tmp_path / "p.jsonl")) == E.expected_evaluations(pcfg)
    dt = time.perf_counter() - t0
    ok = monotone and size_ok and same and count_ok and pmono and pcount and dt < 60
    report(capsys, 4, ok, f"best non-decreasing {monotone} ({best[0]:.3f} -> {best[-1]:.3f}); population fixed "
                          f"{size_ok}; identical archives {same}; rows {len(rows)} = N+N*T {count_ok}; "
                          f"plug-and-play monotone per phase {pmono}, rows {pcount}; {dt:.1f} s (< 60 s)")
    assert ok


# --------------------------------------------------------------------------
# 5. metric oracles

def test_criterion_5_metric_oracles(f64, capsys):
    from test_losses_metrics import brute_auc

    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    auc_err = 0.0
    for i in range(50):
        n = int(rng.integers(20, 400))
        p = rng.random(n) if i % 2 else rng.integers(0, 6, size=n) / 5.0
        y = rng.random(n) < rng.uniform(0.1, 0.5)
        y[0], y[1] = True, False
        auc_err = max(auc_err, abs(M.auc(p, y) - brute_auc(p, y)))
    ident = True
    for _ in range(50):
        n = int(rng.integers(10, 300))
        p, y = rng.random(n), rng.random(n) < 0.3
        tp, fp, tn, fn = M.confusion(p, y)
        m = M.Metrics.from_counts(tp, fp, tn, fn)
        ident &= tp + fp + tn + fn == n and tp + fn == int(y.sum()) and tp + fp == int((p >= 0.5).sum())
        ident &= m.acc == (tp + tn) / n
        if tp + fn:
            ident &= m.se == tp / (tp + fn)
        if tn + fp:
            ident &= m.sp == tn / (tn + fp)
        if tp:
            ident &= abs(m.f1 - 2 * tp / (2 * tp + fp + fn)) < 1e-15
    focal_err = 0.0
    for _ in range(50):
        p = Tensor(rng.uniform(0.01, 0.99, size=(2, 1, 6, 6)))
        y = (rng.random((2, 1, 6, 6)) < 0.25).astype(float)
        f = Lo.focal_loss(p, y, Lo.FocalParams(0.5, 0.0)).item()
        focal_err = max(focal_err, abs(f - 0.5 * Lo.bce_loss(p, y).item()))
    dt = time.perf_counter() - t0
    ok = auc_err < 1e-9 and ident and focal_err < 1e-9 and dt < 30
    report(capsys, 5, ok, f"AUC vs pairwise oracle max err {auc_err:.1e} over 50 (< 1e-9); confusion identities "
                          f"{ident}; focal(w=0, a=0.5) vs BCE/2 max err {focal_err:.1e} (< 1e-9); {dt:.1f} s")
    assert ok


# --------------------------------------------------------------------------
# 6 and 7. desk-scale search

@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    """Joint search for every seed, plug-and-play for the first, plus all-conventional baselines."""
    data = desk_data()
    tcfg = TrainConfig(epochs=20, base_channels=8)
    ev = E.TrainingEvaluator(data, tcfg)
    root = tmp_path_factory.mktemp("desk")
    out = {}
    for seed in DESK_SEEDS:
        cfg = E.SearchConfig(population=DESK_N, generations=DESK_T, depth=2, base_channels=8, epochs=20,
                             base_seed=seed, run_id=f"desk{seed}")
        t0 = time.perf_counter()
        res = E.run_search(cfg, ev, archive_path=root / f"joint{seed}.jsonl")
        wall = time.perf_counter() - t0
        baseline_genome = G.with_neuron_type(res.best_joint, 0)
        base = train_candidate(baseline_genome, data, tcfg, res.best.seed).fitness
        out[seed] = {"joint": res, "wall": wall, "baseline": base}
    cfg = E.SearchConfig(population=DESK_N, generations=DESK_T, depth=2, base_channels=8, epochs=20,
                         base_seed=DESK_SEEDS[0], run_id="desk-pp", mode="plugplay")
    t0 = time.perf_counter()
    out["plugplay"] = E.run_plugplay(cfg, ev, archive_path=root / "plugplay.jsonl")
    out["plugplay_wall"] = time.perf_counter() - t0
    return out


@pytest.mark.slow
def test_criterion_6_desk_search(desk_runs, capsys):
    best = [desk_runs[s]["joint"].best.fitness for s in DESK_SEEDS]
    base = [desk_runs[s]["baseline"] for s in DESK_SEEDS]
    walls = [desk_runs[s]["wall"] / 60 for s in DESK_SEEDS]
    trainings = [desk_runs[s]["joint"].cost["trainings"] for s in DESK_SEEDS]
    med_best, med_base = statistics.median(best), statistics.median(base)
    # one CPU here; candidates within a generation are independent, so 4 workers divide the wall time
    projected = max(walls) / 4
    ok_f1 = med_best >= med_base - 0.01
    ok = ok_f1 and projected < 30
    summaries = ", ".join(G.summary_string(desk_runs[s]["joint"].best_joint) for s in DESK_SEEDS)
    report(capsys, 6, ok, f"median best val F1 {med_best:.4f} vs all-conventional {med_base:.4f} - 0.01 "
                          f"(per seed {['%.4f' % b for b in best]} vs {['%.4f' % b for b in base]}); "
                          f"best summaries {summaries}; wall per seed on 1 CPU {['%.1f' % w for w in walls]} min, "
                          f"trainings {trainings}, projected 4-worker {projected:.1f} min (< 30)")
    assert ok


@pytest.mark.slow
def test_criterion_7_plugplay_accounting(desk_runs, capsys):
    joint = desk_runs[DESK_SEEDS[0]]["joint"].cost
    pp = desk_runs["plugplay"].cost
    ordered = all(pp[k] < joint[k] for k in ("evaluations", "trainings", "epochs"))
    ok = pp["evaluations"] < joint["evaluations"] and ordered
    report(capsys, 7, ok, f"matched N={DESK_N}, T={DESK_T}: plug-and-play {pp} vs joint {joint}; "
                          f"best F1 {desk_runs['plugplay'].best.fitness:.4f} vs "
                          f"{desk_runs[DESK_SEEDS[0]]['joint'].best.fitness:.4f}; "
                          f"wall {desk_runs['plugplay_wall'] / 60:.1f} vs {desk_runs[DESK_SEEDS[0]]['wall'] / 60:.1f} min")
    assert ok


# --------------------------------------------------------------------------
# 8. hypernetwork

@pytest.mark.slow
def test_criterion_8_hypernetwork(capsys):
    t0 = time.perf_counter()
    groups = [(2, 10), (3, 15), (4, 20)]
    records = H.toy_archive(groups, per_group=10, seed=8)
    ds = H.build_dataset(records, channels=(10, 15, 20))
    model, curve = H.train_hypernet(ds, H.HyperTrainConfig(epochs=200, seed=0))
    loss_ok = curve[-1] < curve[0]
    rng = np.random.default_rng(8)
    valid = True
    for _ in range(100):
        d, ch = int(rng.choice(G.DEPTHS)), int(rng.integers(H.CH_MIN, H.CH_MAX + 1))
        g = H.predict(model, d, ch).genome
        valid &= g.depth == d and G.decode(G.encode(g)) == g
        build(g, 2, rng=0)
    agree = H.agreement(model, ds)
    agree_ok = agree["model"] >= agree["baseline"]
    rows = H.eval_hypernet(model, ds, desk_data(), TrainConfig(epochs=20), seeds=DESK_SEEDS, groups=[(2, 10)])
    pred = statistics.median(r["predicted_f1"] for r in rows)
    best = statistics.median(r["archived_best_f1"] for r in rows)
    plain = statistics.median(r["plain_unet_f1"] for r in rows)
    dt = time.perf_counter() - t0
    ok = loss_ok and valid and agree_ok and abs(pred - best) <= 0.05 and dt < 600
    report(capsys, 8, ok, f"{len(ds)} rows in {len(groups)} groups; loss {curve[0]:.4f} -> {curve[-1]:.4f}; "
                          f"100 predictions valid {valid}; agreement {agree['model']:.3f} vs baseline "
                          f"{agree['baseline']:.3f}; desk F1 median predicted {pred:.4f} vs archived-best {best:.4f} "
                          f"(|diff| <= 0.05), plain U-Net {plain:.4f}; {dt:.1f} s (< 600 s)")
    assert ok


# --------------------------------------------------------------------------
# 9. determinism through the CLI

SMALL = """[data]
synth_n = 12
synth_size = 32
synth_seed = 2

[train]
epochs = 2
seed = 5

[search]
population = 4
generations = 2
seed = 9
"""


def test_criterion_9_cli_determinism(tmp_path, capsys):
    cfg = tmp_path / "small.ini"
    cfg.write_text(SMALL)
    g = G.encode(G.random_genome(np.random.default_rng(9), 2))
    toy = tmp_path / "toy.jsonl"
    assert main(["hypernet", "toy-archive", "--out", str(toy)]) == 0
    ds = tmp_path / "ds.json"
    assert main(["hypernet", "build-dataset", "--archive", str(toy), "--out", str(ds), "--channels", "5,10,15"]) == 0
    runs = {
        "search": lambda out: ["search", "--config", str(cfg), "--mode", "both", "--out", str(out)],
        "train": lambda out: ["train", "--config", str(cfg), "--genome", g, "--out", str(out)],
        "hypernet train": lambda out: ["hypernet", "train", "--dataset", str(ds), "--out", str(out)],
    }
    verdicts = {}
    for name, argv in runs.items():
        trees = []
        for rep in ("a", "b"):
            out = tmp_path / f"{name.replace(' ', '_')}_{rep}"
            assert main(argv(out)) == 0
            trees.append(tree_digest(out))
        verdicts[name] = (trees[0] == trees[1], len(trees[0]))
    capsys.readouterr()
    with open(tmp_path / "search_a" / "joint" / "archive.jsonl") as fh:
        n_rows = sum(1 for _ in fh)
    ok = all(v[0] for v in verdicts.values())
    detail = "; ".join(f"{k}: {v[1]} files identical {v[0]}" for k, v in verdicts.items())
    report(capsys, 9, ok, f"{detail}; search archive rows {n_rows}")
    assert ok
