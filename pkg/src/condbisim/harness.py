"""Command-line entry point, run manifests and summary reports.

Exit status: 0 on success, 1 when a verified bound fails, 2 on configuration
errors (bad flags, unknown config fields, malformed environment files), 3 on
other library errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import traceback
from dataclasses import fields, is_dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .cmdp import build_super_mdp, canonical_json, env_hash, generate_env, load_env, save_env
from .errors import CondBisimError, ConfigError, EmptyResults
from .report import BoundReport

THEOREMS = ("2", "3", "4", "5")


# --------------------------------------------------------------------------
# configuration


def code_version() -> str:
    """Package version plus a content hash of the package sources."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def from_dict(cls, doc: dict):
    """Build a (possibly nested) config dataclass, rejecting unknown fields."""
    if not isinstance(doc, dict):
        raise ConfigError(f"{cls.__name__} config must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {', '.join(unknown)}")
    kw = {}
    defaults = cls()
    for name, value in doc.items():
        current = getattr(defaults, name)
        if is_dataclass(current) and isinstance(value, dict):
            kw[name] = from_dict(type(current), value)
        elif isinstance(current, tuple) and isinstance(value, list):
            kw[name] = tuple(value)
        else:
            kw[name] = value
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__} config: {exc}") from exc


def read_config(path, cls):
    if path is None:
        return cls()
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return from_dict(cls, doc)


def config_dict(cfg) -> dict:
    return cfg.to_dict() if hasattr(cfg, "to_dict") else {f.name: getattr(cfg, f.name) for f in fields(cfg)}


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, seed, env=None, outputs=(), name="manifest.json") -> Path:
    doc = {"command": command, "config": config,
           "config_hash": hashlib.sha256(canonical_json(config).encode()).hexdigest(),
           "seed": seed, "env_hash": None if env is None else env_hash(env), "version": code_version(),
           "outputs": {Path(p).name: sha256_file(p) for p in outputs}}
    path = Path(out_dir) / name
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    return path


def worker_count() -> int:
    raw = os.environ.get("CONDBISIM_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"CONDBISIM_THREADS must be an integer, got {raw!r}") from exc
    return max(1, min(n, os.cpu_count() or 1))


def _load_env_arg(path):
    try:
        return load_env(path)
    except OSError as exc:
        raise ConfigError(f"cannot read environment {path}: {exc}") from exc


def _sidecar(out, command, config, seed, env=None) -> Path:
    """Manifest next to a single output file: ``<out>.manifest.json``."""
    out = Path(out)
    return write_manifest(out.parent, command, config, seed, env, [out], name=out.name + ".manifest.json")


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# reports


def write_jsonl(reports, path) -> None:
    with open(path, "w") as fh:
        for rep in reports:
            fh.write(json.dumps(rep.to_dict(), sort_keys=True))
            fh.write("\n")


def read_jsonl(path) -> list[BoundReport]:
    with open(path) as fh:
        return [BoundReport.from_dict(json.loads(line)) for line in fh if line.strip()]


def _g(x) -> str:
    return format(float(x), ".17g")


SUMMARY_FIELDS = ("theorem", "n_trials", "n_pass", "pass_rate", "max_ratio", "max_lhs", "n_ambiguous")
HIST_EDGES = tuple(k / 10 for k in range(11))


def summarize_reports(reports) -> list[dict]:
    groups: dict[str, list] = {}
    for rep in reports:
        groups.setdefault(rep.theorem, []).append(rep)
    rows = []
    for th in sorted(groups):
        reps = groups[th]
        n_pass = sum(r.passed for r in reps)
        rows.append({"theorem": th, "n_trials": len(reps), "n_pass": n_pass, "pass_rate": n_pass / len(reps),
                     "max_ratio": max(r.ratio for r in reps), "max_lhs": max(r.lhs for r in reps),
                     "n_ambiguous": sum(bool(r.extra.get("ambiguous", False)) for r in reps)})
    return rows


def ratio_histogram(reports) -> list[dict]:
    """Counts of lhs/rhs per theorem in tenths of [0, 1], plus an overflow bin above 1."""
    rows = []
    for th in sorted({r.theorem for r in reports}):
        ratios = np.array([r.ratio for r in reports if r.theorem == th])
        for lo, hi in zip(HIST_EDGES[:-1], HIST_EDGES[1:]):
            upper = ratios <= hi if hi == 1.0 else ratios < hi
            rows.append({"theorem": th, "bin_lo": lo, "bin_hi": hi, "count": int(((ratios >= lo) & upper).sum())})
        rows.append({"theorem": th, "bin_lo": 1.0, "bin_hi": math.inf, "count": int((ratios > 1.0).sum())})
    return rows


def summarize_curves(curves: dict) -> list[dict]:
    """Mean and standard error of the eval return across seeds, per preset and step."""
    rows = []
    for preset in sorted(curves):
        runs = curves[preset]
        steps = sorted({row["step"] for run in runs for row in run})
        for step in steps:
            vals = np.array([row["eval_mean"] for run in runs for row in run if row["step"] == step])
            se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
            rows.append({"preset": preset, "step": int(step), "n_seeds": len(vals),
                         "mean": float(vals.mean()), "stderr": se})
    return rows


def paired_comparison(a, b) -> dict:
    """One-sided paired comparison of ``a`` over ``b`` (one value per seed, same seed order).

    The claim ``a > b`` holds when every seed points that way or the mean gap
    exceeds one standard error of the per-seed gaps.
    """
    gaps = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    if gaps.size == 0:
        raise EmptyResults("no paired values")
    se = float(gaps.std(ddof=1) / math.sqrt(gaps.size)) if gaps.size > 1 else 0.0
    mean = float(gaps.mean())
    all_seeds = bool((gaps > 0).all())
    return {"gaps": gaps.tolist(), "mean_gap": mean, "stderr": se, "all_seeds": all_seeds,
            "holds": all_seeds or (mean > se and mean > 0)}


def _write_rows(rows, header, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([row[k] if isinstance(row[k], (int, str)) else _g(row[k]) for k in header])


def emit_report(reports=(), curves: dict | None = None, out_dir=".") -> list[Path]:
    """Plot-ready summary CSVs.

    ``bounds_summary.csv``: theorem, n_trials, n_pass, pass_rate, max_ratio,
    max_lhs, n_ambiguous.  ``ratio_hist.csv``: theorem, bin_lo, bin_hi, count.
    ``curves_summary.csv``: preset, step, n_seeds, mean, stderr.
    """
    reports = list(reports)
    curves = {k: v for k, v in (curves or {}).items() if v}
    if not reports and not curves:
        raise EmptyResults("nothing to report")
    out = _out_dir(out_dir)
    written = []
    if reports:
        p = out / "bounds_summary.csv"
        _write_rows(summarize_reports(reports), SUMMARY_FIELDS, p)
        q = out / "ratio_hist.csv"
        _write_rows(ratio_histogram(reports), ("theorem", "bin_lo", "bin_hi", "count"), q)
        written += [p, q]
    if curves:
        p = out / "curves_summary.csv"
        _write_rows(summarize_curves(curves), ("preset", "step", "n_seeds", "mean", "stderr"), p)
        written.append(p)
    return written


def read_curve_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_env(args) -> int:
    params = {}
    for key, flag in (("side", "side"), ("n_contexts", "contexts"), ("noise_dims", "noise_dims"),
                      ("n_states", "n_states"), ("n_actions", "n_actions"), ("obs_dim", "obs_dim"),
                      ("gamma", "gamma"), ("slip", "slip")):
        val = getattr(args, flag)
        if val is not None:
            params[key] = val
    for item in args.param or []:
        key, _, raw = item.partition("=")
        if not key or not raw:
            raise ConfigError(f"--param expects key=value, got {item!r}")
        params[key] = json.loads(raw)
    cmdp = generate_env(args.kind, params, args.seed)
    save_env(cmdp, args.out)
    _sidecar(args.out, "gen-env", {"kind": args.kind, "params": params}, args.seed, cmdp)
    print(f"gen-env {args.kind}: {cmdp.n_states} states, {cmdp.n_contexts} contexts -> {args.out}")
    return 0


def cmd_metric(args) -> int:
    from .metric import MetricConfig, PseudoMetric, bisim_metric, pi_bisim_metric, write_metric_csv
    from .solver import soft_value_iteration

    cmdp = _load_env_arg(args.env)
    mdp = cmdp.base
    labels = None
    if args.index == "joint":
        mdp, joint = build_super_mdp(cmdp)
        labels = tuple(f"{t}:{o}" for o, t in joint.pairs)
    cfg = MetricConfig(c=args.c, tol=args.tol, mode=args.mode)
    if args.mode == "pi":
        _, _, pi = soft_value_iteration(mdp, args.temperature)
        d = pi_bisim_metric(mdp, pi, cfg)
    else:
        d = bisim_metric(mdp, cfg)
    d = PseudoMetric(d.d, args.index, labels)
    write_metric_csv(d, args.out)
    _sidecar(args.out, "metric", {"c": args.c, "mode": args.mode, "tol": args.tol, "index": args.index,
                                  "temperature": args.temperature}, None, cmdp)
    print(f"metric ({args.mode}, c={args.c}): {len(d)} points, sup {d.sup:.6g} -> {args.out}")
    return 0


def cmd_train_embed(args) -> int:
    from .embed import TrainConfig, save_checkpoint, train_embedding, write_history_csv

    cmdp = _load_env_arg(args.env)
    cfg = read_config(args.config, TrainConfig)
    if args.steps is not None:
        cfg.steps = args.steps
    out = _out_dir(args.out_dir)
    phi, dyn, history = train_embedding(cmdp, cfg, args.seed)
    ckpt, hist = out / "checkpoint.json", out / "history.csv"
    save_checkpoint(ckpt, phi, dyn, cfg)
    write_history_csv(history, hist)
    write_manifest(out, "train-embed", config_dict(cfg), args.seed, cmdp, [ckpt, hist])
    last = history[-1]
    print(f"train-embed: {cfg.steps} steps, delta {last['delta']:.3g}, icc {last['icc_residual']:.3g} -> {out}")
    return 0


def cmd_aggregate(args) -> int:
    from .abstraction import verify_aggregation_bound
    from .embed import load_checkpoint

    cmdp = _load_env_arg(args.env)
    phi, _, _ = load_checkpoint(args.checkpoint)
    c = cmdp.base.gamma if args.c is None else args.c
    rep = verify_aggregation_bound(cmdp, phi, args.eps, c)
    out = _out_dir(args.out_dir)
    path = out / "aggregate.json"
    path.write_text(json.dumps(rep.to_dict(), sort_keys=True) + "\n")
    write_manifest(out, "aggregate", {"eps": args.eps, "c": c, "checkpoint": sha256_file(args.checkpoint)},
                   None, cmdp, [path])
    print(f"aggregate: {rep.extra['n_clusters']} clusters, lhs {rep.lhs:.4g} rhs {rep.rhs:.4g} "
          f"{'pass' if rep.passed else 'FAIL'}")
    return 0 if rep.passed else 1


def cmd_verify(args) -> int:
    from .bounds import SuiteConfig, run_suite

    cfg = read_config(args.config, SuiteConfig)
    env = _load_env_arg(args.env) if args.env else None
    out = _out_dir(args.out_dir)
    theorems = THEOREMS if args.theorem == "all" else (args.theorem,)
    workers = worker_count()
    paths, all_reports = [], []
    for th in theorems:
        reports = run_suite(th, args.trials, args.seed, cfg, env, workers)
        path = out / f"thm{th}.jsonl"
        write_jsonl(reports, path)
        paths.append(path)
        all_reports += reports
    paths += emit_report(all_reports, out_dir=out)
    conf = config_dict(cfg)
    conf.update({"theorems": list(theorems), "trials": args.trials})
    write_manifest(out, "verify", conf, args.seed, env, paths)
    n_fail = sum(not r.passed for r in all_reports)
    print(f"verify {args.theorem}: {len(all_reports)} reports, {n_fail} failed -> {out}")
    return 1 if n_fail else 0


def cmd_rcb(args) -> int:
    from .embed import save_checkpoint
    from .rcb import RCBConfig, run_rcb, write_curve_csv

    cmdp = _load_env_arg(args.env)
    cfg = read_config(args.config, RCBConfig)
    if args.preset is not None:
        cfg.preset = args.preset
    if args.steps is not None:
        cfg.total_steps = args.steps
    cfg.__post_init__()
    out = _out_dir(args.out_dir)
    res = run_rcb(cmdp, cfg, args.seed)
    curve, ckpt = out / "curve.csv", out / "checkpoint.json"
    write_curve_csv(res.curve, curve)
    save_checkpoint(ckpt, res.phi, res.dynamics, cfg)
    write_manifest(out, "rcb", config_dict(cfg), args.seed, cmdp, [curve, ckpt])
    final = res.curve[-1]["eval_mean"] if res.curve else float("nan")
    print(f"rcb {cfg.preset}: {cfg.total_steps} steps, final eval {final:.4g} -> {out}")
    return 0


def cmd_report(args) -> int:
    reports = [r for path in args.reports or [] for r in read_jsonl(path)]
    curves: dict[str, list] = {}
    for item in args.curves or []:
        preset, sep, path = item.partition(":")
        if not sep:
            raise ConfigError(f"--curves expects preset:path, got {item!r}")
        curves.setdefault(preset, []).append(read_curve_csv(path))
    written = emit_report(reports, curves, args.out_dir)
    sources = [*(args.reports or []), *(item.partition(":")[2] for item in args.curves or [])]
    inputs = {Path(p).name: sha256_file(p) for p in sources}
    write_manifest(Path(args.out_dir), "report", {"inputs": inputs}, None, None, written)
    print(f"report: {len(reports)} bound reports, {sum(map(len, curves.values()))} curves -> "
          f"{', '.join(p.name for p in written)}")
    return 0


# --------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="condbisim", description="Conditional bisimulation toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-env", help="write a generated environment as JSON")
    g.add_argument("kind")
    g.add_argument("--side", type=int)
    g.add_argument("--contexts", type=int)
    g.add_argument("--noise-dims", type=int)
    g.add_argument("--n-states", type=int)
    g.add_argument("--n-actions", type=int)
    g.add_argument("--obs-dim", type=int)
    g.add_argument("--gamma", type=float)
    g.add_argument("--slip", type=float)
    g.add_argument("--param", action="append", help="extra generator parameter key=json")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-o", "--out", required=True)
    g.set_defaults(func=cmd_gen_env)

    m = sub.add_parser("metric", help="bisimulation metric as a CSV matrix")
    m.add_argument("--env", required=True)
    m.add_argument("--c", type=float, default=0.5)
    m.add_argument("--mode", choices=("max", "pi"), default="max")
    m.add_argument("--tol", type=float, default=1e-9)
    m.add_argument("--temperature", type=float, default=0.1)
    m.add_argument("--index", choices=("states", "joint"), default="states")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_metric)

    t = sub.add_parser("train-embed", help="train an embedding with the pairwise loss")
    t.add_argument("--env", required=True)
    t.add_argument("--config")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out-dir", default="out/train")
    t.set_defaults(func=cmd_train_embed)

    a = sub.add_parser("aggregate", help="epsilon-aggregate a trained embedding and check the value bound")
    a.add_argument("--env", required=True)
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--eps", type=float, default=0.0)
    a.add_argument("--c", type=float)
    a.add_argument("--out-dir", default="out/aggregate")
    a.set_defaults(func=cmd_aggregate)

    v = sub.add_parser("verify", help="randomized bound-check suites")
    v.add_argument("theorem", choices=(*THEOREMS, "all"))
    v.add_argument("--trials", type=int, default=100)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--env")
    v.add_argument("--config")
    v.add_argument("--out-dir", default="out/verify")
    v.set_defaults(func=cmd_verify)

    r = sub.add_parser("rcb", help="toy-scale agent loop")
    r.add_argument("--env", required=True)
    r.add_argument("--config")
    r.add_argument("--preset")
    r.add_argument("--steps", type=int)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out-dir", default="out/rcb")
    r.set_defaults(func=cmd_rcb)

    rep = sub.add_parser("report", help="summary CSVs from bound reports and learning curves")
    rep.add_argument("--reports", nargs="*")
    rep.add_argument("--curves", nargs="*", help="preset:path entries")
    rep.add_argument("--out-dir", default="out/report")
    rep.set_defaults(func=cmd_report)
    return p


def execute(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CondBisimError, ValueError, KeyError) as exc:
        module = _origin(exc)
        kind = 2 if isinstance(exc, (ValueError, KeyError)) else 3
        print(f"{module}.{type(exc).__name__}: {exc}", file=sys.stderr)
        return kind


def _origin(exc: BaseException) -> str:
    """Package module in which the exception was raised."""
    pkg = Path(__file__).parent
    origin = "harness"
    for frame in traceback.extract_tb(exc.__traceback__):
        path = Path(frame.filename)
        if path.parent == pkg:
            origin = path.stem
    return origin


def main() -> None:  # pragma: no cover
    sys.exit(execute())
