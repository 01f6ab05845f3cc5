"""Command-line entry point: ``dntclone <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 victim fault, 3 budget exhausted.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import explain, plotting
from .blackbox import BudgetExhausted, ChipBlackBox, ChipSpec, DEFAULT_CHIP, MalfunctionError
from .dnt import (
    DntClone,
    DntConfig,
    SWEEP_PINS,
    SimplifyConfig,
    TrainReport,
    baseline_train,
    bootstrap,
    evaluate_sweep,
    simplify,
    train,
)
from .neural import TrainConfig

log = logging.getLogger("dntclone")

EXIT_OK, EXIT_USAGE, EXIT_FAULT, EXIT_BUDGET = 0, 1, 2, 3

# every key a config file may set, with its default
DEFAULTS = {
    "victim": "builtin-chip",
    "seed_count": 20000,
    "tree_depth": 8,
    "min_leaf": 5,
    "error": 1e-3,
    "batch_size": 100,
    "max_iters": 500,
    "strategy": "targeted",
    "target_transform": "asinh",
    "learning_rate": 1e-2,
    "decay_steps": 3000.0,
    "steps_per_call": 10,
    "train_batch_size": 64,
    "optimizer": "adam",
    "simplify_depth": None,
    "rank_training": "2",
    "seed": 0,
    "out": "out",
    "threads": 1,
    "budget": None,
    "plots": True,
}
POSITIVE = ("seed_count", "tree_depth", "min_leaf", "error", "batch_size", "learning_rate",
            "steps_per_call", "train_batch_size", "threads")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def load_config(path) -> dict:
    """Flat JSON object of key/value pairs."""
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict) or any(isinstance(v, (dict, list)) for v in data.values()):
        raise UsageError("config must be a flat key-value object")
    unknown = set(data) - set(DEFAULTS)
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    return data


def resolve(args) -> dict:
    """Defaults, then the config file, then any flag given on the command line."""
    cfg = dict(DEFAULTS)
    if args.config:
        cfg.update(load_config(args.config))
    for key in DEFAULTS:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    for key in POSITIVE:
        if cfg[key] is not None and not cfg[key] > 0:
            raise UsageError(f"{key} must be positive")
    if cfg["max_iters"] < 0:
        raise UsageError("max_iters must be non-negative")
    if cfg["budget"] is not None and cfg["budget"] < 0:
        raise UsageError("budget must be non-negative")
    return cfg


def victim_spec(cfg) -> ChipSpec:
    if cfg["victim"] in (None, "builtin-chip"):
        return DEFAULT_CHIP
    try:
        return ChipSpec.load(cfg["victim"])
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load victim spec {cfg['victim']}: {exc}") from exc


def dnt_config(cfg) -> DntConfig:
    spec = victim_spec(cfg)
    if cfg["tree_depth"] > len(spec.pins):
        raise UsageError(f"tree_depth {cfg['tree_depth']} exceeds the {len(spec.pins)} inputs")
    return DntConfig(
        seed_count=int(cfg["seed_count"]),
        tree_depth=int(cfg["tree_depth"]),
        min_leaf=int(cfg["min_leaf"]),
        batch_size=int(cfg["batch_size"]),
        error=float(cfg["error"]),
        strategy=cfg["strategy"],
        seed=int(cfg["seed"]),
        threads=int(cfg["threads"]),
        target_transform=cfg["target_transform"],
        train=TrainConfig(
            learning_rate=float(cfg["learning_rate"]),
            batch_size=int(cfg["train_batch_size"]),
            steps_per_call=int(cfg["steps_per_call"]),
            optimizer=cfg["optimizer"],
            clip_norm=10.0,
            decay_steps=cfg["decay_steps"] or None,
        ),
    )


def _out(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_vector(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.replace(",", " ").split()])
    except ValueError as exc:
        raise UsageError(f"bad input vector: {exc}") from exc


def parse_grid(text: str) -> np.ndarray:
    """``lo:hi:step``, ``lo:hi`` (101 points), or comma separated values."""
    try:
        if ":" in text:
            parts = [float(v) for v in text.split(":")]
            if len(parts) == 2:
                return np.linspace(parts[0], parts[1], 101)
            lo, hi, step = parts
            if step <= 0 or hi < lo:
                raise ValueError("need lo <= hi and a positive step")
            return np.linspace(lo, hi, int(round((hi - lo) / step)) + 1)
        return np.array([float(v) for v in text.split(",")])
    except ValueError as exc:
        raise UsageError(f"bad grid {text!r}: {exc}") from exc


# commands ----------------------------------------------------------------


def cmd_simulate(args, cfg) -> int:
    spec = victim_spec(cfg)
    bb = ChipBlackBox(spec, budget=cfg["budget"])
    if (args.input is None) == (args.grid is None):
        raise UsageError("give exactly one of --input or --grid")
    if args.input is not None:
        X = _parse_vector(args.input)[None, :]
    else:
        try:
            X = np.loadtxt(args.grid, delimiter=",", ndmin=2)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read grid file: {exc}") from exc
    try:
        y = bb.query_batch(X)
    finally:
        led = bb.ledger
        print(f"# ledger queries_used={led.queries_used} budget={led.budget} faults={led.fault_count}",
              file=sys.stderr)
    for v in y:
        print(repr(float(v)))
    return EXIT_OK


def _save_train(out: Path, clone, report: TrainReport, bb, plots: bool) -> None:
    clone.save(out / "clone")
    report.save_json(out / "report.json")
    report.save_csv(out / "report.csv")
    clone.flagged.save_csv(out / "flagged.csv")
    bb.ledger.save(out / "ledger.json")
    if plots and report.rows:
        plotting.plot_report(report.rows, out / "report.png")


def cmd_train(args, cfg) -> int:
    out = _out(cfg)
    config = dnt_config(cfg)
    bb = ChipBlackBox(victim_spec(cfg), budget=cfg["budget"])
    clone = bootstrap(bb, config)
    try:
        report = train(clone, bb, int(cfg["max_iters"]))
    except BudgetExhausted as exc:
        # keep whatever was learned before the budget ran out
        _save_train(out, clone, getattr(exc, "report", TrainReport()), bb, cfg["plots"])
        raise
    _save_train(out, clone, report, bb, cfg["plots"])
    final = report.rows[-1]["active_fraction"] if report.rows else clone.active_fraction
    print(f"slots={len(clone.slots)} iterations={clone.iterations} active_fraction={final:.4f} "
          f"queries={bb.ledger.queries_used}")
    return EXIT_OK


BENCH_COLUMNS = ("iter", "active_norm_cum", "baseline_norm_cum", "active_fraction")


def bench_rows(active: TrainReport, baseline: TrainReport) -> list[dict]:
    """Both cumulative-work curves in units of the baseline's first-iteration work.

    Once the active variant stops, its curve stays flat and its active
    fraction stays at its final value.
    """
    if not baseline.rows:
        return []
    unit = baseline.rows[0]["batch_work"] or 1
    rows = []
    last_cum, last_frac = 0, 1.0
    for k, b in enumerate(baseline.rows):
        if k < len(active.rows):
            last_cum = active.rows[k]["cumulative_work"]
            last_frac = active.rows[k]["active_fraction"]
        rows.append({
            "iter": b["iteration"],
            "active_norm_cum": last_cum / unit,
            "baseline_norm_cum": b["cumulative_work"] / unit,
            "active_fraction": last_frac,
        })
    return rows


def cmd_bench(args, cfg) -> int:
    out = _out(cfg)
    config = dnt_config(cfg)
    bb = ChipBlackBox(victim_spec(cfg), budget=cfg["budget"])
    clone = bootstrap(bb, config)
    twin = copy.deepcopy(clone)  # same seed data and initial networks
    active = train(clone, bb, int(cfg["max_iters"]))
    baseline = baseline_train(twin, bb, int(cfg["max_iters"]))
    rows = bench_rows(active, baseline)
    with open(out / "bench.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    active.save_csv(out / "report_active.csv")
    baseline.save_csv(out / "report_baseline.csv")
    if cfg["plots"] and rows:
        plotting.plot_bench(rows, out / "bench.png")
    if rows:
        a, b = rows[-1]["active_norm_cum"], rows[-1]["baseline_norm_cum"]
        print(f"active_work={a:.4g} baseline_work={b:.4g} ratio={a / b:.4f} "
              f"final_active_fraction={rows[-1]['active_fraction']:.4f}")
    return EXIT_OK


def _load_clone(path) -> DntClone:
    d = Path(path)
    if not (d / "manifest.json").is_file():
        raise UsageError(f"no clone found in {d}")
    return DntClone.load(d)


def cmd_evaluate(args, cfg) -> int:
    out = _out(cfg)
    clone = _load_clone(args.clone)
    bb = ChipBlackBox(victim_spec(cfg))
    if not 1 <= args.mode <= 5:
        raise UsageError("mode must be in 1..5")
    pin = SWEEP_PINS[args.mode] if args.pin is None else args.pin
    if not 0 <= pin < clone.m:
        raise UsageError(f"pin must be in 0..{clone.m - 1}")
    grid = None if args.grid is None else parse_grid(args.grid)
    try:
        r = evaluate_sweep(clone, bb, args.mode, pin, grid)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    stem = f"sweep_mode{args.mode}_pin{pin}"
    with open(out / f"{stem}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("input", "target", "prediction"))
        for row in zip(r["input"], r["target"], r["prediction"]):
            w.writerow([repr(float(v)) for v in row])
    summary = {k: r[k] for k in ("mode", "pin", "rmse", "range", "rel_rmse")}
    summary["points"] = int(len(r["input"]))
    (out / f"{stem}.json").write_text(json.dumps(summary, indent=1) + "\n")
    if cfg["plots"]:
        plotting.plot_sweep(r, out / f"{stem}.png")
    print(f"mode={args.mode} pin={pin} points={summary['points']} rmse={r['rmse']:.6g} "
          f"range={r['range']:.6g} rel_rmse={r['rel_rmse']:.6g}")
    return EXIT_OK


def cmd_simplify(args, cfg) -> int:
    clone = _load_clone(args.clone)
    depth = args.depth if args.depth is not None else cfg["simplify_depth"]
    if depth is None:
        raise UsageError("simplify needs --depth (or simplify_depth in the config)")
    ranks = [int(v) for v in str(cfg["rank_training"]).split(",")]
    try:
        new, summary = simplify(clone, SimplifyConfig(depth=int(depth), rank_training=ranks))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = _out(cfg)
    new.save(out / "clone")
    (out / "simplify.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(f"slots {summary['slots_before']} -> {summary['slots_after']}")
    return EXIT_OK


def cmd_explain(args, cfg) -> int:
    clone = _load_clone(args.clone)
    doc = explain.render(explain.extract_rules(clone, victim_spec(cfg)), args.format)
    out = _out(cfg)
    (out / ("rules.txt" if args.format == "text" else "rules.json")).write_text(doc)
    sys.stdout.write(doc)
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "bench": cmd_bench,
    "evaluate": cmd_evaluate,
    "simplify": cmd_simplify,
    "explain": cmd_explain,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON file of key/value settings")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int)
    common.add_argument("--budget", type=int, help="maximum number of victim queries")
    common.add_argument("--victim", help="chip spec JSON, or builtin-chip")
    common.add_argument("--no-plots", dest="plots", action="store_false", default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    def run_opts(p):
        p.add_argument("--seed-count", dest="seed_count", type=int)
        p.add_argument("--tree-depth", dest="tree_depth", type=int)
        p.add_argument("--min-leaf", dest="min_leaf", type=int)
        p.add_argument("--error", type=float)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--max-iters", dest="max_iters", type=int)
        p.add_argument("--strategy", choices=("targeted", "uniform"))
        p.add_argument("--target-transform", dest="target_transform", choices=("asinh", "none"))
        p.add_argument("--learning-rate", dest="learning_rate", type=float)
        p.add_argument("--decay-steps", dest="decay_steps", type=float, help="0 disables decay")
        p.add_argument("--steps-per-call", dest="steps_per_call", type=int)
        p.add_argument("--train-batch-size", dest="train_batch_size", type=int)
        p.add_argument("--optimizer", choices=("adam", "sgd"))

    parser = _Parser(prog="dntclone", description="Clone a black-box chip with a Deep Neural Tree.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common], help="query the victim directly")
    p.add_argument("--input", help="comma separated pin voltages")
    p.add_argument("--grid", help="CSV file, one input vector per row")

    p = sub.add_parser("train", parents=[common], help="bootstrap and train a clone")
    run_opts(p)

    p = sub.add_parser("bench", parents=[common], help="active learning against the always-train baseline")
    run_opts(p)

    p = sub.add_parser("evaluate", parents=[common], help="sweep one pin and compare clone and victim")
    p.add_argument("--clone", required=True, help="clone directory")
    p.add_argument("--mode", type=int, required=True)
    p.add_argument("--pin", type=int)
    p.add_argument("--grid", help="lo:hi:step, lo:hi, or comma separated values")

    p = sub.add_parser("simplify", parents=[common], help="merge leaf networks at a shallower depth")
    p.add_argument("--clone", required=True)
    p.add_argument("--depth", type=int, help="attachment depth n1")
    p.add_argument("--rank-training", dest="rank_training", help="networks kept per node, e.g. 2 or 2,1,3")

    p = sub.add_parser("explain", parents=[common], help="print the clone's decision rules")
    p.add_argument("--clone", required=True)
    p.add_argument("--format", choices=("text", "json"), default="text")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BudgetExhausted as exc:
        print(f"budget exhausted: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except MalfunctionError as exc:
        print(f"victim fault: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
