"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the pytest terminal
summary (and to stdout when run with ``-s`` or as a script).
"""

import copy
import sys
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from dntclone import cli
from dntclone.blackbox import DEFAULT_CHIP, ChipBlackBox, enabled_fraction, uniform_inputs
from dntclone.dnt import DntConfig, SimplifyConfig, baseline_train, bootstrap, evaluate_sweep, simplify, train
from dntclone.neural import TrainConfig, default_network, relu_network, train_batch
from dntclone.regtree import best_split

from oracles import brute_force_split, chip_rows, clean_inputs_for, gradient_check


def record(k, ok, detail):
    ACCEPTANCE[k] = (bool(ok), detail)
    print(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def test_1_chip_oracle_equivalence():
    X = uniform_inputs(np.random.default_rng(2024), DEFAULT_CHIP.sampling_ranges(), 50_000)
    t0 = time.perf_counter()
    got = ChipBlackBox().query_batch(X)
    elapsed = time.perf_counter() - t0
    want = chip_rows(X)
    mismatches = int(np.sum(got != want))
    bb = ChipBlackBox()
    mismatches += sum(bb.query(x) != w for x, w in zip(X[::50], want[::50]))
    record(1, mismatches == 0 and elapsed < 5, f"{mismatches} mismatches over 50000 points, query time {elapsed:.2f}s")


def test_2_skew_statistics():
    t0 = time.perf_counter()
    X = uniform_inputs(np.random.default_rng(7), DEFAULT_CHIP.sampling_ranges(), 100_000)
    on = (X[:, 0] - X[:, 3] >= 4.0) & (X[:, 1] >= 2.5) & (X[:, 2] >= 2.5)
    frac = on.mean()
    flags = X[on][:, 4:9] >= 2.5
    mode = np.where(flags.any(axis=1), flags.argmax(axis=1) + 1, 0)
    shares = np.array([(mode == k).mean() for k in range(1, 6)])
    expected = np.array([0.5, 0.25, 0.125, 0.0625, 0.03125])
    # the chip really is idle outside the enabled region
    idle_ok = bool(np.all(ChipBlackBox().query_batch(X[~on][:5000]) == 0.0))
    elapsed = time.perf_counter() - t0
    ok = abs(frac - enabled_fraction()) <= 0.03 and np.all(np.abs(shares - expected) <= 0.03) and idle_ok
    record(2, ok and elapsed < 10,
           f"enabled {frac:.4f} vs {enabled_fraction():.4f}; shares {np.round(shares, 4).tolist()}; {elapsed:.1f}s")


def test_3_regression_tree_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    bad = 0
    for _ in range(200):
        n, m = int(rng.integers(2, 101)), int(rng.integers(1, 4))
        if rng.random() < 0.5:
            X = rng.integers(0, 6, (n, m)).astype(float)  # repeated values, plenty of ties
            y = rng.integers(0, 4, n).astype(float)
        else:
            X, y = rng.random((n, m)), rng.normal(size=n)
        got = best_split(X, y)
        want = None if np.all(y == y[0]) else brute_force_split(X, y)
        bad += (None if got is None else tuple(got)) != want
    example = best_split(np.array([[0.0], [1.0], [2.0], [3.0]]), np.array([0.0, 0.0, 1.0, 1.0]))
    elapsed = time.perf_counter() - t0
    record(3, bad == 0 and example.threshold == 1.5 and elapsed < 30,
           f"{bad}/200 disagreements, 4-point threshold {example.threshold}, {elapsed:.1f}s")


def test_4_gradient_checks():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(50):
        net = default_network(18, rng)
        X = clean_inputs_for(net, rng)
        worst = max(worst, gradient_check(net, X, rng.normal(size=len(X)), rng, n_check=300))
    elapsed = time.perf_counter() - t0
    record(4, worst < 1e-3 and elapsed < 30, f"max relative error {worst:.2e} over 50 networks, {elapsed:.1f}s")


def _mean_rel_error(net, X, y):
    return float(np.mean(np.abs(net(X) - y) / np.abs(y)))


def test_5_nalu_extrapolation():
    t0 = time.perf_counter()
    wins, detail = 0, []
    size = default_network(2, np.random.default_rng(0)).n_params
    for seed in range(3):
        rng = np.random.default_rng(seed)
        X = rng.uniform(0, 5, (2000, 2))
        Xt = rng.uniform(5, 10, (1000, 2))
        y, yt = X[:, 0] * X[:, 1], Xt[:, 0] * Xt[:, 1]
        cfg = TrainConfig(learning_rate=1e-3, batch_size=64, steps_per_call=10_000, optimizer="adam", clip_norm=10.0)
        errs = []
        for make in (lambda r: default_network(2, r), lambda r: relu_network(2, size, rng=r)):
            net = make(np.random.default_rng([seed, 1]))
            train_batch(net, X, y, cfg, rng=np.random.default_rng([seed, 2]))
            errs.append(_mean_rel_error(net, Xt, yt))
        wins += errs[0] < errs[1]
        detail.append(f"{errs[0]:.3f}/{errs[1]:.3f}")
    elapsed = time.perf_counter() - t0
    record(5, wins >= 2 and elapsed < 300,
           f"NALU beats ReLU in {wins}/3 seeds (NALU/ReLU error {', '.join(detail)}), {elapsed:.0f}s")


@pytest.fixture(scope="module")
def default_run():
    """The default configuration trained for 500 iterations, with its baseline twin and simplification."""
    bb = ChipBlackBox()
    config = DntConfig()
    t0 = time.perf_counter()
    clone = bootstrap(bb, config)
    twin = copy.deepcopy(clone)
    report = train(clone, bb, 65)
    at65 = {m: evaluate_sweep(clone, ChipBlackBox(), m) for m in (2, 3)}
    report.extend(train(clone, bb, 435))
    at500 = {m: evaluate_sweep(clone, ChipBlackBox(), m) for m in (2, 3)}
    train_time = time.perf_counter() - t0
    base = baseline_train(twin, ChipBlackBox(), 500)
    queries = bb.ledger.queries_used
    small, summary = simplify(clone, SimplifyConfig(depth=config.tree_depth - 2))
    simplify_queries = bb.ledger.queries_used - queries
    after = {m: evaluate_sweep(small, ChipBlackBox(), m) for m in (2, 3)}
    return dict(clone=clone, report=report, base=base, at65=at65, at500=at500, train_time=train_time,
                summary=summary, after=after, simplify_queries=simplify_queries)


@pytest.mark.slow
def test_6_clone_fidelity(default_run):
    a, b = default_run["at65"], default_run["at500"]
    rel_ok = all(b[m]["rel_rmse"] < 0.1 for m in (2, 3))
    improving = all(b[m]["rmse"] < a[m]["rmse"] for m in (2, 3))
    detail = "; ".join(
        f"mode {m}: rel {b[m]['rel_rmse']:.4f}, rmse {a[m]['rmse']:.4g} -> {b[m]['rmse']:.4g}" for m in (2, 3)
    )
    t = default_run["train_time"]
    record(6, rel_ok and improving and t < 1200, f"{detail}; {t:.0f}s")


@pytest.mark.slow
def test_7_active_learning_efficiency(default_run):
    active, base = default_run["report"], default_run["base"]
    frac = active.rows[-1]["active_fraction"]
    ratio = active.rows[-1]["cumulative_work"] / base.rows[-1]["cumulative_work"]
    zero = default_run["simplify_queries"] == 0
    record(7, frac <= 0.7 and ratio <= 0.5 and zero,
           f"final active fraction {frac:.3f}, work ratio {ratio:.3f}, simplify queries {default_run['simplify_queries']}")


@pytest.mark.slow
def test_8_simplification_soundness(default_run):
    s = default_run["summary"]
    before, after = default_run["at500"], default_run["after"]
    ratios = {m: after[m]["rmse"] / before[m]["rmse"] for m in (2, 3)}
    ok = s["slots_after"] < s["slots_before"] and all(r <= 2.0 for r in ratios.values())
    record(8, ok, f"slots {s['slots_before']} -> {s['slots_after']}; RMSE ratio mode 2 {ratios[2]:.3f}, "
                  f"mode 3 {ratios[3]:.3f}")


def test_9_determinism(tmp_path):
    args = ["--seed-count", "4000", "--max-iters", "25", "--threads", "1", "--seed", "11", "--no-plots"]
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = [cli.main(["train", *args, "--out", str(o)]) for o in outs]
    same_report = (outs[0] / "report.csv").read_bytes() == (outs[1] / "report.csv").read_bytes()
    same_manifest = (outs[0] / "clone" / "manifest.json").read_bytes() == \
        (outs[1] / "clone" / "manifest.json").read_bytes()
    record(9, codes == [0, 0] and same_report and same_manifest,
           f"exit codes {codes}, report identical {same_report}, manifest identical {same_manifest}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
