"""Command-line front end: generate, train, select-eps, diagnose, benchmark."""

import argparse
import hashlib
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import diagnostics
from .errors import DimError, DronpeError
from .flows import load_checkpoint, make_flow, save_checkpoint
from .objectives import EarlyStop, TrainConfig, npe_loss, train
from .selection import CRITERIA, EpsSearchConfig, select_epsilon
from .simulators import TASKS, generate_dataset, load_dataset, sample_prior, save_dataset

__all__ = ["main", "build_parser", "cell_hash", "run_cell", "run_benchmark", "aggregate"]

EXIT_OK, EXIT_USAGE, EXIT_ABORT = 0, 2, 3
TEST_SEED_OFFSET = 1_000_000
AUTO = "auto"
SWEEP_GRID = (0.001, 0.01, 0.1, 1.0, 10.0)


class UsageError(Exception):
    pass


def _dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _fmt(v):
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_table(path, header, rows):
    lines = [",".join(header)] + [",".join(_fmt(v) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# shared option groups
# --------------------------------------------------------------------------

def _add_flow_args(p):
    p.add_argument("--flow", choices=("coupling", "maf"), default="coupling")
    p.add_argument("--hidden-width", type=int, default=64)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--num-blocks", type=int, default=6)
    p.add_argument("--no-standardize", action="store_true")


def _add_train_args(p):
    p.add_argument("--lambda", dest="lam", type=float, default=100.0)
    p.add_argument("--epochs", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--early-stop", action="store_true")
    p.add_argument("--record-timing", action="store_true")


def _add_search_args(p):
    p.add_argument("--budget", type=int, default=10)
    p.add_argument("--criterion", choices=CRITERIA, default="klcal")
    p.add_argument("--gamma", type=float, default=0.0)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--search-M", type=int, default=1000)


def build_parser():
    parser = argparse.ArgumentParser(prog="dronpe", description="Distributionally robust NPE toolkit")
    parser.add_argument("--config", help="JSON file mirroring the flags; flags override it")
    parser.add_argument("--threads", type=int, default=1, help="worker processes for independent runs")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate a dataset")
    g.add_argument("--task", required=True, choices=sorted(TASKS))
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a flow")
    t.add_argument("--data", required=True)
    t.add_argument("--method", choices=("npe", "dro", "bal"), default="npe")
    t.add_argument("--eps", default="0", help="radius, or 'auto' for validation-based selection")
    t.add_argument("--out", required=True)
    _add_flow_args(t)
    _add_train_args(t)
    _add_search_args(t)

    s = sub.add_parser("select-eps", help="select the DRO radius and retrain")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    _add_flow_args(s)
    _add_train_args(s)
    _add_search_args(s)

    d = sub.add_parser("diagnose", help="coverage, calibration and NLPD of a checkpoint")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--M", type=int, default=1000)
    d.add_argument("--n", type=int, default=500, help="number of test pairs used")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--alphas", default=None, help="comma-separated levels")
    d.add_argument("--summary", choices=("density", "distance"), default="density")
    d.add_argument("--theta0", default="prior-draw", help="'prior-draw' or comma-separated values")
    d.add_argument("--out", required=True)

    b = sub.add_parser("benchmark", help="multi-seed cross product of runs")
    b.add_argument("--tasks", default="two_moons")
    b.add_argument("--n", default="1024", help="comma-separated simulation budgets")
    b.add_argument("--methods", default="npe,dro")
    b.add_argument("--eps", default="0.1", help="comma-separated radii for dro; 'auto' selects per run")
    b.add_argument("--sweep", action="store_true", help="run dro over the epsilon sweep grid")
    b.add_argument("--seeds", type=int, default=5)
    b.add_argument("--n-test", type=int, default=500)
    b.add_argument("--M", type=int, default=1000)
    b.add_argument("--out", required=True)
    _add_flow_args(b)
    _add_train_args(b)
    return parser


def parse_args(argv):
    parser = build_parser()
    early = argparse.ArgumentParser(add_help=False)
    early.add_argument("--config")
    pre, _ = early.parse_known_args(argv)
    if pre.config:
        doc = json.loads(Path(pre.config).read_text())
        doc = {k.replace("-", "_"): v for k, v in doc.items()}
        parser.set_defaults(**doc)
        for action in parser._subparsers._group_actions:
            for sp in action.choices.values():
                for a in sp._actions:
                    # a value from the file satisfies a required flag
                    if a.dest in doc:
                        a.required = False
                known = {a.dest for a in sp._actions}
                sp.set_defaults(**{k: v for k, v in doc.items() if k in known})
    return parser.parse_args(argv)


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _train_config(args, method, epsilon):
    return TrainConfig(
        method=method, epsilon=float(epsilon), lam=args.lam, epochs=args.epochs, batch_size=args.batch_size,
        lr=args.lr, weight_decay=args.weight_decay, seed=args.seed,
        early_stop=EarlyStop() if args.early_stop else None, record_timing=args.record_timing,
    )


def _flow_kwargs(args):
    return {"kind": args.flow, "hidden_width": args.hidden_width, "depth": args.depth,
            "num_blocks": args.num_blocks, "seed": args.seed, "standardize": not args.no_standardize}


def _new_model(flow_kw, ds):
    kw = dict(flow_kw)
    kind = kw.pop("kind")
    standardize = kw.pop("standardize")
    return make_flow(kind, ds.d_theta, ds.d_x, x_ref=ds.x if standardize else None, **kw)


def _search_config(args):
    return EpsSearchConfig(budget=args.budget, criterion=args.criterion, gamma=args.gamma, alpha=args.alpha,
                           M=args.search_M, seed=args.seed)


def _write_training(out, model, trace, extra=None):
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "checkpoint.json")
    (out / "trace.csv").write_text(trace.to_csv())
    doc = {"aborted": trace.aborted, "error": trace.error, "epochs_run": len(trace),
           "best_epoch": trace.best_epoch}
    doc.update(extra or {})
    _dump_json(doc, out / "summary.json")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_generate(args):
    if args.n < 0:
        raise UsageError("--n must be nonnegative")
    ds = generate_dataset(args.task, args.n, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    return EXIT_OK


def cmd_train(args):
    ds = load_dataset(args.data)
    out = Path(args.out)
    flow_kw = _flow_kwargs(args)
    if args.eps == "auto":
        if args.method != "dro":
            raise UsageError("--eps auto requires --method dro")
        return _select(args, ds, out)
    try:
        eps = float(args.eps)
    except ValueError:
        raise UsageError("--eps must be a number or 'auto'") from None
    cfg = replace(_train_config(args, args.method, eps), task=ds.task)
    model, trace = train(_new_model(flow_kw, ds), ds, cfg)
    _write_training(out, model, trace, {"method": args.method, "epsilon": eps, "train_config": asdict(cfg),
                                        "final_train_risk": trace.train_risk[-1] if len(trace) else None})
    return EXIT_ABORT if trace.aborted else EXIT_OK


def _select(args, ds, out):
    res = select_epsilon(ds, _flow_kwargs(args), _train_config(args, "dro", 0.0), _search_config(args))
    out.mkdir(parents=True, exist_ok=True)
    (out / "selection.json").write_text(res.to_json())
    _write_training(out, res.model, res.trace, {"method": "dro", "epsilon": res.eps_star})
    return EXIT_ABORT if res.trace.aborted else EXIT_OK


def cmd_select_eps(args):
    return _select(args, load_dataset(args.data), Path(args.out))


def _theta0(spec, task, d_theta, seed):
    if spec == "prior-draw":
        if not task:
            raise UsageError("prior-draw needs a dataset with a task")
        return sample_prior(task, 1, np.random.default_rng([seed, 7]))[0]
    vals = np.array([float(v) for v in spec.split(",")])
    if vals.shape[0] != d_theta:
        raise UsageError("--theta0 has the wrong dimension")
    return vals


def cmd_diagnose(args):
    model = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    if (ds.d_theta, ds.d_x) != (model.d_theta, model.d_x):
        raise UsageError("checkpoint and dataset dimensions differ")
    pairs = ds.subset(np.arange(min(args.n, len(ds))))
    alphas = diagnostics.DEFAULT_ALPHAS
    if args.alphas:
        alphas = np.array([float(a) for a in args.alphas.split(",")])
    theta0 = None
    if args.summary == "distance":
        theta0 = _theta0(args.theta0, ds.task, ds.d_theta, args.seed)
    report = diagnostics.diagnose(model, pairs, args.M, args.seed, alphas, summary=args.summary, theta0=theta0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "coverage.csv").write_text(report.curve.table())
    return EXIT_OK


# --------------------------------------------------------------------------
# benchmark
# --------------------------------------------------------------------------

def cell_hash(cell):
    """Short hash covering every field of a run description."""
    blob = json.dumps(cell, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def run_cell(cell, root):
    """Train and evaluate one (task, n, method, epsilon, seed) cell, caching by hash."""
    run_dir = Path(root) / "runs" / cell_hash(cell)
    done = run_dir / "metrics.json"
    if done.exists():
        return json.loads(done.read_text())
    run_dir.mkdir(parents=True, exist_ok=True)
    _dump_json(cell, run_dir / "cell.json")
    ds = generate_dataset(cell["task"], cell["n"], cell["seed"])
    test = generate_dataset(cell["task"], cell["n_test"], TEST_SEED_OFFSET + cell["seed"])
    flow_kw = {k: cell[k] for k in ("kind", "hidden_width", "depth", "num_blocks", "standardize")}
    flow_kw["seed"] = cell["seed"]
    eps = 0.0 if cell["epsilon"] == AUTO else cell["epsilon"]
    cfg = TrainConfig(method=cell["method"], epsilon=eps, lam=cell["lam"], epochs=cell["epochs"],
                      batch_size=cell["batch_size"], lr=cell["lr"], weight_decay=cell["weight_decay"],
                      seed=cell["seed"], early_stop=EarlyStop() if cell["early_stop"] else None, task=cell["task"])
    metrics = {"cell": cell}
    if cell["epsilon"] == AUTO:
        res = select_epsilon(ds, flow_kw, cfg, EpsSearchConfig(M=cell["M"], seed=cell["seed"]))
        (run_dir / "selection.json").write_text(res.to_json())
        model, trace = res.model, res.trace
        metrics["eps_star"] = res.eps_star
    else:
        model, trace = train(_new_model(flow_kw, ds), ds, cfg)
    save_checkpoint(model, run_dir / "checkpoint.json")
    (run_dir / "trace.csv").write_text(trace.to_csv())
    metrics.update({"aborted": trace.aborted, "error": trace.error})
    if not trace.aborted:
        report = diagnostics.diagnose(model, test, cell["M"], cell["seed"], delta_levels=(0.05,))
        train_risk = npe_loss(model, ds)
        metrics.update({
            "train_risk": train_risk, "test_risk": report.nlpd, "gap": report.nlpd - train_risk,
            "nlpd": report.nlpd, "klcal": report.klcal, "delta_cov_005": report.delta_cov[0.05],
            "alphas": [float(a) for a in report.curve.alphas],
            "coverage": [float(c) for c in report.curve.coverages],
            "omega_start": trace.omega_start, "omega_end": trace.omega[-1] if len(trace) else None,
        })
    _dump_json(metrics, done)
    return metrics


def make_cells(tasks, ns, methods, eps_list, seeds, base):
    cells = []
    for task in tasks:
        for n in ns:
            for method in methods:
                radii = eps_list if method == "dro" else [0.0]
                for eps in radii:
                    for seed in seeds:
                        cell = dict(base)
                        cell.update(task=task, n=int(n), method=method, epsilon=eps if eps == AUTO else float(eps),
                                    seed=int(seed))
                        cells.append(cell)
    return cells


def _mean_sd(vals):
    a = np.asarray(vals, dtype=float)
    if a.size == 0:
        return None, None
    return float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0


def aggregate(results, out, sweep=False):
    """Write aggregate tables (summary, coverage, and optionally the epsilon sweep)."""
    out = Path(out)
    groups = {}
    for r in results:
        c = r["cell"]
        groups.setdefault((c["task"], c["n"], c["method"], c["epsilon"]), []).append(r)
    # "auto" radii sort after the numeric ones
    keys = sorted(groups, key=lambda k: k[:3] + ((k[3] == AUTO, 0.0 if k[3] == AUTO else k[3]),))
    rows, cov_rows = [], []
    for key in keys:
        ok = [r for r in groups[key] if not r["aborted"]]
        row = list(key) + [len(ok), len(groups[key])]
        for m in ("nlpd", "klcal", "delta_cov_005", "train_risk", "test_risk", "gap"):
            row += list(_mean_sd([r[m] for r in ok]))
        rows.append(row)
        if ok:
            cov = np.array([r["coverage"] for r in ok])
            for j, a in enumerate(ok[0]["alphas"]):
                mean, sd = _mean_sd(cov[:, j])
                cov_rows.append(list(key) + [a, 1 - a, mean, sd])
    head = ["task", "n", "method", "epsilon", "completed", "total"]
    for m in ("nlpd", "klcal", "delta_cov_005", "train_risk", "test_risk", "gap"):
        head += [f"{m}_mean", f"{m}_sd"]
    _write_table(out / "summary.csv", head, rows)
    _write_table(out / "coverage.csv", ["task", "n", "method", "epsilon", "alpha", "nominal", "coverage_mean",
                                        "coverage_sd"], cov_rows)
    if sweep:
        srows = []
        for key in keys:
            ok = [r for r in groups[key] if not r["aborted"]]
            if not ok:
                continue
            srows.append([key[0], key[1], key[3]] + [_mean_sd([r[m] for r in ok])[0] for m in
                                                     ("train_risk", "test_risk", "gap", "delta_cov_005", "klcal")])
        _write_table(out / "eps_sweep.csv", ["task", "n", "epsilon", "train_risk", "test_risk", "gap",
                                             "delta_cov_005", "klcal"], srows)
    return rows


def _run_cell_star(a):
    return run_cell(*a)


def run_benchmark(cells, out, threads=1, sweep=False):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(c, str(out)) for c in cells]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_cell_star, jobs))
    else:
        results = [_run_cell_star(j) for j in jobs]
    _dump_json({"cells": [cell_hash(c) for c in cells]}, out / "manifest.json")
    aggregate(results, out, sweep=sweep)
    return results


def _parse_radius(text):
    text = text.strip()
    if text == AUTO:
        return AUTO
    try:
        value = float(text)
    except ValueError:
        raise UsageError(f"--eps entries must be numbers or {AUTO!r}") from None
    if not value >= 0:
        raise UsageError("--eps entries must be nonnegative")
    return value


def cmd_benchmark(args):
    tasks = [t.strip() for t in args.tasks.split(",") if t.strip()]
    for t in tasks:
        if t not in TASKS:
            raise UsageError(f"unknown task {t!r}")
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in ("npe", "dro", "bal"):
            raise UsageError(f"unknown method {m!r}")
    eps = list(SWEEP_GRID) if args.sweep else [_parse_radius(e) for e in args.eps.split(",")]
    if args.sweep and "dro" not in methods:
        methods.append("dro")
    base = {"kind": args.flow, "hidden_width": args.hidden_width, "depth": args.depth,
            "num_blocks": args.num_blocks, "standardize": not args.no_standardize, "lam": args.lam,
            "epochs": args.epochs, "batch_size": args.batch_size, "lr": args.lr,
            "weight_decay": args.weight_decay, "early_stop": bool(args.early_stop), "n_test": args.n_test,
            "M": args.M}
    ns = [int(v) for v in args.n.split(",")]
    cells = make_cells(tasks, ns, methods, eps, range(args.seeds), base)
    results = run_benchmark(cells, args.out, threads=args.threads, sweep=args.sweep)
    return EXIT_OK if all(not r["aborted"] for r in results) else EXIT_ABORT


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "select-eps": cmd_select_eps,
            "diagnose": cmd_diagnose, "benchmark": cmd_benchmark}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, DimError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, DronpeError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
