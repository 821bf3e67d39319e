"""Command-line interface.

Every run-producing command writes its effective configuration to
``<out>/config.ini``; passing that file back with ``--config`` reproduces the
run. Command-line flags override config values, which override defaults.

Exit codes: 0 success, 1 user error (bad input, refused action), 2 internal error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import sys
import traceback
from dataclasses import fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

log = logging.getLogger("neuroprog")


class UserError(Exception):
    """Bad input or a refused action; reported without a traceback (exit 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# configuration

DATA_DEFAULTS = {"path": "", "synth_n": 64, "synth_size": 64, "synth_seed": 1, "downsample": 1}
SEARCH_DEFAULTS = {
    "population": 20,
    "generations": 50,
    "p_cross": 0.9,
    "p_mut": 0.7,
    "p_bitflip": 0.5,
    "mode": "joint",
    "depth": 2,
    "n_int": 5,
    "seed": 0,
    "surrogate": "",
    "run_id": "run",
}
HYPER_DEFAULTS = {"epochs": 200, "batch": 4, "lr": 0.001, "seed": 0}


def _train_defaults() -> dict:
    from .segtrain.train import TrainConfig

    d = {f.name: f.default for f in fields(TrainConfig)}
    d["seed"] = 0
    return d


def _convert(value, like):
    if isinstance(like, bool):
        if isinstance(value, bool):
            return value
        v = str(value).strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise UserError(f"expected a boolean, got {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return str(value)


def read_config(path) -> Dict[str, Dict[str, str]]:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise UserError(f"config file {p} not found")
    cp = configparser.ConfigParser()
    cp.read(p, encoding="utf-8")
    return {s: dict(cp[s]) for s in cp.sections()}


def resolve(section: str, defaults: dict, ini: dict, overrides: dict) -> dict:
    """Defaults < config file < command line; values typed like the defaults."""
    out = dict(defaults)
    for key, val in ini.get(section, {}).items():
        if key not in defaults:
            raise UserError(f"unknown key {key!r} in config section [{section}]")
        out[key] = val
    for key, val in overrides.items():
        if val is not None and key in defaults:
            out[key] = val
    try:
        return {k: _convert(v, defaults[k]) if defaults[k] is not None else v for k, v in out.items()}
    except ValueError as exc:
        raise UserError(f"[{section}]: {exc}") from exc


def write_config(path, sections: Dict[str, dict]) -> Path:
    cp = configparser.ConfigParser()
    for name, values in sections.items():
        cp[name] = {k: str(v) for k, v in values.items()}
    with open(path, "w", encoding="utf-8") as fh:
        cp.write(fh)
    return Path(path)


def _prepare_out(out, force: bool = False, allow_existing: bool = False) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not (force or allow_existing):
        raise UserError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(dcfg: dict):
    from .segtrain.data import load_dataset, synth_vessels

    if dcfg["path"]:
        p = Path(dcfg["path"])
        if not p.is_dir():
            raise UserError(f"dataset directory {p} not found")
        return load_dataset(p)
    return synth_vessels(dcfg["synth_n"], dcfg["synth_size"], rng=dcfg["synth_seed"])


def _read_genome(text: str):
    from .genome import decode

    if text.startswith("@"):
        p = Path(text[1:])
        if not p.exists():
            raise UserError(f"genome file {p} not found")
        text = p.read_text().strip()
    return decode(text)


def _train_cfg(tcfg: dict):
    from .segtrain.train import TrainConfig

    return TrainConfig(**{k: v for k, v in tcfg.items() if k != "seed"})


def _fmt(v):
    if isinstance(v, float):
        return "nan" if v != v else f"{v:.6f}"
    return v


METRIC_COLS = ["run_id", "genome", "split", "acc", "se", "sp", "f1", "auc", "params", "seed", "flags"]


def write_metrics_csv(path, rows: List[dict]) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLS, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in METRIC_COLS})
    return Path(path)


# --------------------------------------------------------------------------
# genome

def cmd_genome(args) -> int:
    from . import genome as G
    from .netbuilder import param_count, to_dot

    if args.action == "encode":
        if args.json:
            text = args.json if args.json.lstrip().startswith("{") else Path(args.json).read_text()
            try:
                g = G.Genome.from_json(json.loads(text))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise UserError(f"bad genome JSON: {exc}") from exc
        elif args.summary:
            g = G.from_summary(args.summary)
        else:
            rng = np.random.default_rng(args.seed)
            g = G.random_genome(rng, args.depth, args.n_int, args.mode)
        print(G.encode(g))
        return 0

    if args.action == "decode":
        if ":" not in args.text and not args.text.startswith("@"):
            conn = G.decode_connections(args.text)
            print(f"connections only: {len(conn) + 1} nodes")
            for j in range(1, len(conn) + 2):
                preds = [i + 1 for i, b in enumerate(conn[j - 2]) if b] if j > 1 else []
                print(f"  node{j} <- {{{','.join(map(str, preds))}}}")
            return 0
        g = _read_genome(args.text)
        if args.json:
            print(json.dumps(g.to_json(), indent=1))
            return 0
        print(f"depth {g.depth}, mode {g.mode}, {g.n_int} nodes per block, {len(g)} bits")
        for i, blk in enumerate(g.blocks):
            print(f"block {i}: {blk.conn_text()}")
            for j in range(1, blk.n_int + 1):
                preds = blk.predecessors(j)
                src = "{" + ",".join(map(str, preds)) + "}"
                op = ""
                if g.mode == G.JOINT:
                    op = f"  {G.OpGene.from_value(blk.ops[j - 1]).label()} (seq {blk.ops[j - 1] + 1})"
                else:
                    op = f"  gene {format(blk.ops[j - 1], f'0{g.width}b')}"
                print(f"  node{j} <- {src}{op}")
        if g.mode == G.JOINT:
            print(f"summary {G.summary_string(g)}")
            print(f"params(C={args.channels}) {param_count(g, args.channels)}")
        return 0

    if args.action == "viz":
        g = _read_genome(args.text)
        dot = to_dot(g)
        if args.out:
            Path(args.out).write_text(dot)
        else:
            sys.stdout.write(dot)
        return 0

    if args.action == "stats":
        from . import plotting
        from .evolution import read_archive

        recs = []
        for a in args.archive:
            if not Path(a).exists():
                raise UserError(f"archive {a} not found")
            recs.extend(read_archive(a))
        if not recs:
            raise UserError("archive is empty")
        seen = {}
        for r in recs:
            if r.genome not in seen or r.fitness > seen[r.genome]:
                seen[r.genome] = r.fitness
        ranked = sorted(seen.items(), key=lambda kv: (-kv[1], kv[0]))
        if args.top:
            ranked = ranked[: args.top]
        genomes = [G.decode(t) for t, _ in ranked]
        out = _prepare_out(args.out, allow_existing=True)
        counts = G.sequence_counts(genomes)
        total = sum(counts.values())
        with open(out / "sequence_frequency.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sequence", "label", "count", "fraction"])
            for s in range(1, 17):
                c = counts.get(s, 0)
                w.writerow([s, G.op_gene_from_sequence(s).label(), c, f"{c / total:.6f}"])
        depths = sorted({g.depth for g in genomes})
        fracs_by_depth = {}
        with open(out / "neuron_fraction.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["depth", "block", "role", "quadratic_fraction", "genomes"])
            for d in depths:
                gs = [G.as_joint(g) for g in genomes if g.depth == d]
                fr = []
                for b in range(2 * d + 1):
                    q = np.mean([v & 1 for g in gs for v in g.blocks[b].ops])
                    role = "encoder" if b < d else ("bottleneck" if b == d else "decoder")
                    w.writerow([d, b, role, f"{q:.6f}", len(gs)])
                    fr.append(float(q))
                fracs_by_depth[d] = fr
        plotting.op_frequency(counts, out / "sequence_frequency.png")
        for d, fr in fracs_by_depth.items():
            plotting.neuron_fraction(fr, out / f"neuron_fraction_d{d}.png")
        print(f"{len(genomes)} genomes summarized into {out}")
        return 0
    raise UserError(f"unknown genome action {args.action}")


# --------------------------------------------------------------------------
# data

def cmd_data(args) -> int:
    from .segtrain.data import DataError, ingest_fundus, synth_vessels, write_dataset

    out = Path(args.out)
    try:
        if args.action == "synth":
            ds = synth_vessels(args.n, args.size, rng=args.seed)
        else:
            src = Path(args.src)
            if not src.is_dir():
                raise UserError(f"source directory {src} not found")
            ds = ingest_fundus(src, args.downsample)
            ds.meta["source"] = src.name
        write_dataset(ds, out, force=args.force)
    except DataError as exc:
        raise UserError(str(exc)) from exc
    h, w = ds.samples[0].hw
    print(f"wrote {len(ds)} samples ({h}x{w}) to {out}")
    return 0


# --------------------------------------------------------------------------
# train / eval

def cmd_train(args) -> int:
    from . import plotting
    from .checkpoint import save_network
    from .genome import encode
    from .segtrain.train import split_data, train_candidate

    ini = read_config(args.config)
    dcfg = resolve("data", DATA_DEFAULTS, ini, {"path": args.data})
    tdef = _train_defaults()
    tdef["genome"] = ""
    tdef["run_id"] = "train"
    tcfg = resolve("train", tdef, ini, {
        "genome": args.genome, "run_id": args.run_id, "epochs": args.epochs, "batch": args.batch, "loss": args.loss,
        "alpha": args.alpha, "omega": args.omega, "base_channels": args.channels, "seed": args.seed,
        "threshold": args.threshold,
    })
    if not tcfg["genome"]:
        raise UserError("a genome is required (--genome TEXT or @FILE, or [train] genome)")
    genome = _read_genome(tcfg["genome"])
    tcfg["genome"] = encode(genome)
    out = _prepare_out(args.out, args.force)
    write_config(out / "config.ini", {"data": dcfg, "train": tcfg})
    cfg = _train_cfg({k: v for k, v in tcfg.items() if k not in ("genome", "run_id")})
    data = _load_data(dcfg)
    res = train_candidate(genome, data, cfg, tcfg["seed"])
    _, val = split_data(data, cfg)
    save_network(out / "model.npck", res.network, {
        "seed": tcfg["seed"], "val_fraction": cfg.val_fraction, "threshold": cfg.threshold,
        "diverged": res.diverged, "data": dcfg, "run_id": tcfg["run_id"],
    })
    row = dict(res.metrics.as_row(), run_id=tcfg["run_id"], genome=tcfg["genome"], split="val",
               params=res.network.num_parameters(), seed=tcfg["seed"])
    write_metrics_csv(out / "metrics.csv", [row])
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(res.history, 1):
            w.writerow([i, f"{v:.8f}"])
    if res.history:
        plotting.loss_curve(res.history, out / "loss.png")
    print(f"val F1 {res.metrics.f1:.6f}  AUC {res.metrics.auc:.6f}  ({len(val)} validation images)")
    return 1 if res.diverged else 0


def cmd_eval(args) -> int:
    from PIL import Image

    from .checkpoint import CheckpointError, load_network
    from .segtrain.data import SegDataset
    from .segtrain.metrics import overlay
    from .segtrain.train import evaluate, predict_proba

    try:
        net, meta = load_network(args.checkpoint, _read_genome(args.genome) if args.genome else None)
    except CheckpointError as exc:
        raise UserError(str(exc)) from exc
    ini = read_config(args.config)
    stored = {k: v for k, v in meta.get("data", {}).items() if k in DATA_DEFAULTS}
    dcfg = resolve("data", DATA_DEFAULTS, {"data": {**stored, **ini.get("data", {})}}, {"path": args.data})
    data = _load_data(dcfg)
    samples = data.samples
    if args.split == "val":
        _, samples = data.split(meta.get("val_fraction", 0.25))
    elif args.split == "train":
        samples, _ = data.split(meta.get("val_fraction", 0.25))
    threshold = args.threshold if args.threshold is not None else meta.get("threshold", 0.5)
    m = evaluate(net, samples, threshold)
    out = _prepare_out(args.out, args.force)
    from .genome import encode

    run_id = args.run_id or meta.get("run_id", "eval")
    row = dict(m.as_row(), run_id=run_id, genome=encode(net.genome), split=args.split, params=net.num_parameters(), seed=meta.get("seed", ""))
    write_metrics_csv(out / "metrics.csv", [row])
    if args.overlays or args.probmaps:
        probs = predict_proba(net, samples)
        for s, p in zip(samples, probs):
            if args.probmaps:
                Image.fromarray(np.clip(np.rint(p * 255), 0, 255).astype(np.uint8)).save(out / f"{s.name}_prob.png")
            if args.overlays:
                Image.fromarray(overlay(p, s.mask, s.fov, threshold)).save(out / f"{s.name}_overlay.png")
    print(f"{args.split} F1 {m.f1:.6f}  ACC {m.acc:.6f}  SE {m.se:.6f}  SP {m.sp:.6f}  AUC {m.auc:.6f}")
    return 0


# --------------------------------------------------------------------------
# search

def _search_once(mode, scfg_kw, evaluator, out: Path, resume: bool, workers: int):
    from . import plotting
    from .evolution import SearchConfig, expected_evaluations, run_plugplay, run_search, write_history_csv
    from .genome import encode
    from .netbuilder import to_dot

    scfg = SearchConfig(mode=mode, **scfg_kw)
    runner = run_search if mode == "joint" else run_plugplay
    res = runner(scfg, evaluator, out / "archive.jsonl", resume=resume, workers=workers)
    write_history_csv(res.history, out / "generations.csv")
    (out / "best_genome.txt").write_text(encode(res.best_joint) + "\n")
    (out / "best.dot").write_text(to_dot(res.best_joint, name=f"{mode}_best"))
    cost = dict(res.cost, mode=mode, expected_evaluations=expected_evaluations(scfg), phases=res.phases)
    (out / "cost.json").write_text(json.dumps(cost, indent=1, sort_keys=True) + "\n")
    summary = {"mode": mode, "best_genome": encode(res.best_joint), "best_fitness": res.best.fitness,
               "best_params": res.best.params}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    plotting.search_progress(res.history, out / "progress.png")
    print(f"[{mode}] best F1 {res.best.fitness:.4f}  evaluations {res.cost['evaluations']}  "
          f"trainings {res.cost['trainings']}  epochs {res.cost['epochs']}")
    print(f"[{mode}] best genome {encode(res.best_joint)}")
    return res


def cmd_search(args) -> int:
    from . import plotting
    from .evolution import ResumeError, SearchError, SurrogateEvaluator, TrainingEvaluator

    ini = read_config(args.config)
    dcfg = resolve("data", DATA_DEFAULTS, ini, {"path": args.data})
    tcfg = resolve("train", _train_defaults(), ini, {
        "epochs": args.epochs, "base_channels": args.channels, "loss": args.loss, "batch": args.batch,
    })
    scfg = resolve("search", SEARCH_DEFAULTS, ini, {
        "population": args.population, "generations": args.generations, "mode": args.mode,
        "depth": args.depth, "seed": args.seed, "surrogate": args.surrogate, "run_id": args.run_id,
    })
    if scfg["mode"] not in ("joint", "plugplay", "both"):
        raise UserError(f"mode must be joint, plugplay or both, got {scfg['mode']!r}")
    sections = {"data": dcfg, "train": tcfg, "search": scfg}
    out = Path(args.out)
    if args.resume:
        if not (out / "config.ini").exists():
            raise UserError(f"nothing to resume in {out} (no config.ini)")
        old = read_config(out / "config.ini")
        new = {s: {k: str(v) for k, v in vals.items()} for s, vals in sections.items()}
        diff = sorted(f"{s}.{k}" for s in new for k in set(new[s]) | set(old.get(s, {}))
                      if new[s].get(k) != old.get(s, {}).get(k))
        if diff:
            raise UserError(f"refusing to resume: configuration changed ({', '.join(diff)})")
    else:
        _prepare_out(out, args.force)
        for stale in ("archive.jsonl", "joint/archive.jsonl", "plugplay/archive.jsonl"):
            if (out / stale).exists():
                (out / stale).unlink()
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / "config.ini", sections)

    if scfg["surrogate"]:
        evaluator = SurrogateEvaluator(scfg["surrogate"], tcfg["base_channels"])
    else:
        evaluator = TrainingEvaluator(_load_data(dcfg), _train_cfg(tcfg))
    kw = {
        "population": scfg["population"], "generations": scfg["generations"], "p_cross": scfg["p_cross"],
        "p_mut": scfg["p_mut"], "p_bitflip": scfg["p_bitflip"], "depth": scfg["depth"], "n_int": scfg["n_int"],
        "base_channels": tcfg["base_channels"], "epochs": tcfg["epochs"], "base_seed": scfg["seed"],
        "run_id": scfg["run_id"],
    }
    modes = ["joint", "plugplay"] if scfg["mode"] == "both" else [scfg["mode"]]
    costs = {}
    try:
        for mode in modes:
            sub = out / mode if len(modes) > 1 else out
            sub.mkdir(exist_ok=True)
            res = _search_once(mode, kw, evaluator, sub, args.resume, args.workers)
            costs[mode] = dict(res.cost, best_f1=res.best.fitness)
    except ResumeError as exc:
        raise UserError(str(exc)) from exc
    except SearchError as exc:
        raise UserError(str(exc)) from exc
    if len(modes) > 1:
        with open(out / "cost_comparison.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["mode", "evaluations", "trainings", "epochs", "best_f1"])
            for mode, c in costs.items():
                w.writerow([mode, c["evaluations"], c["trainings"], c["epochs"], f"{c['best_f1']:.6f}"])
        plotting.cost_comparison(costs, out / "cost_comparison.png")
    return 0


# --------------------------------------------------------------------------
# hypernet

def _int_list(text: str) -> List[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise UserError(f"expected a comma-separated integer list, got {text!r}") from exc


def _groups(text: str) -> List[Tuple[int, int]]:
    out = []
    for item in text.split(","):
        try:
            d, c = item.strip().lower().split("x")
            out.append((int(d), int(c)))
        except ValueError as exc:
            raise UserError(f"expected DEPTHxCHANNELS items such as 2x8, got {item!r}") from exc
    return out


def cmd_hypernet(args) -> int:
    from . import hypernet as H
    from . import plotting
    from .evolution import ArchiveRecord, read_archive

    if args.action == "toy-archive":
        recs = H.toy_archive(_groups(args.groups), args.per_group, seed=args.seed)
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text("".join(r.to_line() + "\n" for r in recs))
        print(f"wrote {len(recs)} toy records to {args.out}")
        return 0

    if args.action == "build-dataset":
        recs: List[ArchiveRecord] = []
        for a in args.archive:
            if not Path(a).exists():
                raise UserError(f"archive {a} not found")
            recs.extend(read_archive(a))
        ds = H.build_dataset(recs, _int_list(args.channels), _int_list(args.depths), args.top_k)
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        H.save_dataset(ds, args.out)
        print(f"{len(ds)} rows from {len(set(ds.groups))} groups; {len(ds.skipped)} empty groups skipped")
        for w in ds.warnings:
            print(f"warning: {w}")
        return 0

    if args.action == "train":
        ini = read_config(args.config)
        hcfg = resolve("hypernet", dict(HYPER_DEFAULTS, dataset=""), ini, {
            "epochs": args.epochs, "batch": args.batch, "lr": args.lr, "seed": args.seed, "dataset": args.dataset,
        })
        if not hcfg["dataset"] or not Path(hcfg["dataset"]).exists():
            raise UserError(f"dataset {hcfg['dataset']!r} not found")
        ds = H.load_dataset(hcfg["dataset"])
        out = _prepare_out(args.out, args.force)
        write_config(out / "config.ini", {"hypernet": hcfg})
        cfg = H.HyperTrainConfig(epochs=hcfg["epochs"], batch=hcfg["batch"], lr=hcfg["lr"], seed=hcfg["seed"])
        model, curve = H.train_hypernet(ds, cfg)
        model.save(out / "hypernet.npck", {"seed": cfg.seed, "epochs": cfg.epochs})
        H.write_loss_curve(curve, out / "loss.csv")
        plotting.loss_curve(curve, out / "loss.png", "hypernetwork training loss")
        print(f"loss {curve[0]:.4f} -> {curve[-1]:.4f} over {len(curve)} epochs")
        return 0

    if args.action == "predict":
        if not Path(args.model).exists():
            raise UserError(f"model {args.model} not found")
        model = H.HypernetModel.load(args.model)
        pred = H.predict(model, args.depth, args.channels)
        obj = pred.to_json()
        if args.out:
            Path(args.out).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
        print(obj["genome"])
        print(obj["summary"])
        return 0

    if args.action == "eval":
        for p in (args.model, args.dataset):
            if not Path(p).exists():
                raise UserError(f"{p} not found")
        model = H.HypernetModel.load(args.model)
        ds = H.load_dataset(args.dataset)
        ini = read_config(args.config)
        dcfg = resolve("data", DATA_DEFAULTS, ini, {"path": args.data})
        tcfg = resolve("train", _train_defaults(), ini, {"epochs": args.epochs})
        out = _prepare_out(args.out, args.force)
        write_config(out / "config.ini", {"data": dcfg, "train": tcfg})
        agree = H.agreement(model, ds)
        (out / "agreement.json").write_text(json.dumps(agree, indent=1, sort_keys=True) + "\n")
        groups = _groups(args.groups) if args.groups else None
        try:
            rows = H.eval_hypernet(model, ds, _load_data(dcfg), _train_cfg(tcfg), _int_list(args.seeds), groups)
        except H.HypernetError as exc:
            raise UserError(str(exc)) from exc
        cols = list(rows[0])
        with open(out / "report.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: _fmt(v) for k, v in r.items()})
        print(f"agreement {agree['model']:.4f} (marginal-mode baseline {agree['baseline']:.4f})")
        for r in rows:
            print(f"d={r['depth']} C={r['channels']} seed={r['seed']}: predicted {r['predicted_f1']:.4f} "
                  f"archived-best {r['archived_best_f1']:.4f} plain U-Net {r['plain_unet_f1']:.4f}")
        return 0
    raise UserError(f"unknown hypernet action {args.action}")


# --------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="neuroprog", description="Genetic neuron programming for vessel segmentation.")
    p.add_argument("--log-level", default="WARNING", help="DEBUG, INFO, WARNING (default) or ERROR")
    p.add_argument("--dtype", choices=["float32", "float64"], help="numeric build mode (default float32)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("genome", help="encode, decode, render and summarize genomes")
    gs = g.add_subparsers(dest="action", required=True, parser_class=_Parser)
    e = gs.add_parser("encode", help="print a genome string (random, from JSON, or from a summary)")
    e.add_argument("--json", help="genome JSON file or literal")
    e.add_argument("--summary", help='per-block summary such as "16-3-13-12-9-14-13"')
    e.add_argument("--depth", type=int, default=2)
    e.add_argument("--n-int", type=int, default=5)
    e.add_argument("--mode", default="joint", choices=["joint", "arch", "neuron"])
    e.add_argument("--seed", type=int, default=0)
    d = gs.add_parser("decode", help="print block adjacency and operations")
    d.add_argument("text", help="genome string or @file")
    d.add_argument("--json", action="store_true")
    d.add_argument("--channels", type=int, default=8)
    v = gs.add_parser("viz", help="write a DOT graph")
    v.add_argument("text")
    v.add_argument("--out")
    st = gs.add_parser("stats", help="operation frequency and neuron-type fractions from archives")
    st.add_argument("archive", nargs="+")
    st.add_argument("--out", required=True)
    st.add_argument("--top", type=int, default=0, help="only the top-K distinct genomes by fitness")

    dt = sub.add_parser("data", help="create datasets")
    ds = dt.add_subparsers(dest="action", required=True, parser_class=_Parser)
    sy = ds.add_parser("synth", help="synthetic vessel images")
    sy.add_argument("--n", type=int, default=64)
    sy.add_argument("--size", type=int, default=64)
    sy.add_argument("--seed", type=int, default=1)
    sy.add_argument("--out", required=True)
    sy.add_argument("--force", action="store_true")
    ig = ds.add_parser("ingest", help="fundus images/masks(/fov) directory")
    ig.add_argument("--src", required=True)
    ig.add_argument("--downsample", type=int, default=1)
    ig.add_argument("--out", required=True)
    ig.add_argument("--force", action="store_true")

    def data_flags(q):
        q.add_argument("--config")
        q.add_argument("--data", help="dataset directory (default: synthetic data per [data])")

    tr = sub.add_parser("train", help="train one genome")
    data_flags(tr)
    tr.add_argument("--genome", help="genome string or @file")
    tr.add_argument("--out", required=True)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--batch", type=int)
    tr.add_argument("--loss", choices=["focal", "dice", "jaccard"])
    tr.add_argument("--alpha", type=float)
    tr.add_argument("--omega", type=float)
    tr.add_argument("--channels", type=int)
    tr.add_argument("--threshold", type=float)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--run-id", help="label for the metrics rows (default: train)")
    tr.add_argument("--force", action="store_true")

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    data_flags(ev)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--genome", help="expected genome; mismatch is an error")
    ev.add_argument("--out", required=True)
    ev.add_argument("--split", choices=["val", "train", "all"], default="val")
    ev.add_argument("--threshold", type=float)
    ev.add_argument("--run-id", help="label for the metrics rows (default: the checkpoint's)")
    ev.add_argument("--overlays", action="store_true")
    ev.add_argument("--probmaps", action="store_true")
    ev.add_argument("--force", action="store_true")

    se = sub.add_parser("search", help="genetic search")
    data_flags(se)
    se.add_argument("--out", required=True)
    se.add_argument("--mode", choices=["joint", "plugplay", "both"])
    se.add_argument("--population", type=int)
    se.add_argument("--generations", type=int)
    se.add_argument("--depth", type=int)
    se.add_argument("--channels", type=int)
    se.add_argument("--epochs", type=int)
    se.add_argument("--batch", type=int)
    se.add_argument("--loss", choices=["focal", "dice", "jaccard"])
    se.add_argument("--seed", type=int)
    se.add_argument("--run-id")
    se.add_argument("--surrogate", help="instant fitness instead of training: quad_fraction or ones_fraction")
    se.add_argument("--workers", type=int, default=1)
    se.add_argument("--resume", action="store_true")
    se.add_argument("--force", action="store_true")

    hn = sub.add_parser("hypernet", help="genome-predicting hypernetwork")
    hs = hn.add_subparsers(dest="action", required=True, parser_class=_Parser)
    ta = hs.add_parser("toy-archive", help="write a synthetic archive for smoke runs")
    ta.add_argument("--out", required=True)
    ta.add_argument("--groups", default="2x5,3x10,4x15", help="DEPTHxCHANNELS list")
    ta.add_argument("--per-group", type=int, default=20)
    ta.add_argument("--seed", type=int, default=0)
    bd = hs.add_parser("build-dataset", help="top-10 rows per (depth, channels) group")
    bd.add_argument("--archive", nargs="+", required=True)
    bd.add_argument("--out", required=True)
    bd.add_argument("--channels", default="5,10,15,20,25,30,35")
    bd.add_argument("--depths", default="2,3,4")
    bd.add_argument("--top-k", type=int, default=10)
    ht = hs.add_parser("train")
    ht.add_argument("--config")
    ht.add_argument("--dataset")
    ht.add_argument("--out", required=True)
    ht.add_argument("--epochs", type=int)
    ht.add_argument("--batch", type=int)
    ht.add_argument("--lr", type=float)
    ht.add_argument("--seed", type=int)
    ht.add_argument("--force", action="store_true")
    hp = hs.add_parser("predict")
    hp.add_argument("--model", required=True)
    hp.add_argument("--depth", type=int, required=True, choices=[2, 3, 4])
    hp.add_argument("--channels", type=int, required=True)
    hp.add_argument("--out")
    he = hs.add_parser("eval")
    data_flags(he)
    he.add_argument("--model", required=True)
    he.add_argument("--dataset", required=True)
    he.add_argument("--out", required=True)
    he.add_argument("--epochs", type=int)
    he.add_argument("--seeds", default="0")
    he.add_argument("--groups", help="DEPTHxCHANNELS list to train (default: every dataset group)")
    he.add_argument("--force", action="store_true")
    return p


COMMANDS = {
    "genome": cmd_genome,
    "data": cmd_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "search": cmd_search,
    "hypernet": cmd_hypernet,
}


def main(argv: Optional[List[str]] = None) -> int:
    from .checkpoint import CheckpointError
    from .genome import GenomeError
    from .hypernet import HypernetError
    from .segtrain.data import DataError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    from .tensor import get_default_dtype, set_default_dtype

    prev_dtype = get_default_dtype()
    if args.dtype:
        set_default_dtype(args.dtype)
    try:
        return COMMANDS[args.command](args)
    except (UserError, GenomeError, DataError, HypernetError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 1
    except Exception:  # anything else is a bug
        traceback.print_exc()
        return 2
    finally:
        set_default_dtype(prev_dtype)


if __name__ == "__main__":
    sys.exit(main())
