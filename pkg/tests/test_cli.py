import csv
import json

import numpy as np
import pytest

from dntclone.cli import bench_rows, main, parse_grid
from dntclone.dnt import TrainReport

FAST = ["--seed-count", "1500", "--tree-depth", "4", "--steps-per-call", "2", "--no-plots"]


def mode2_input(p11):
    x = [5, 5, 5, 0, 0, 5] + [0] * 12
    x[11] = p11
    return ",".join(map(str, x))


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", *FAST, "--max-iters", "4", "--out", str(out)]) == 0
    return out


def test_simulate_mode2_constant(capsys):
    assert main(["simulate", "--input", mode2_input(0)]) == 0
    out = capsys.readouterr()
    assert out.out.strip() == "7.0"
    assert "queries_used=1" in out.err


def test_simulate_fault_exit_code(capsys):
    assert main(["simulate", "--input", mode2_input(12)]) == 2
    assert "malfunction" in capsys.readouterr().err


def test_simulate_grid_file(tmp_path, capsys):
    grid = tmp_path / "g.csv"
    rows = [mode2_input(v) for v in (0, 1, 2)]
    grid.write_text("\n".join(rows) + "\n")
    assert main(["simulate", "--grid", str(grid)]) == 0
    out = capsys.readouterr()
    assert len(out.out.split()) == 3
    assert "queries_used=3" in out.err


def test_usage_errors_exit_one(tmp_path):
    assert main(["simulate"]) == 1
    with pytest.raises(SystemExit) as info:
        main(["train", "--bogus"])
    assert info.value.code == 1
    assert main(["train", "--tree-depth", "19", "--out", str(tmp_path)]) == 1
    assert main(["explain", "--clone", str(tmp_path / "missing")]) == 1


def test_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed_count": 1200, "tree_depth": 3, "max_iters": 0, "plots": False}))
    out = tmp_path / "o"
    assert main(["train", "--config", str(cfg), "--tree-depth", "2", "--out", str(out)]) == 0
    manifest = json.loads((out / "clone" / "manifest.json").read_text())
    assert manifest["config"]["seed_count"] == 1200
    assert manifest["config"]["tree_depth"] == 2
    assert manifest["iterations"] == 0
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nested": {"a": 1}}))
    assert main(["train", "--config", str(bad), "--out", str(out)]) == 1


def test_train_writes_artifacts(trained_dir):
    for name in ("report.json", "report.csv", "flagged.csv", "ledger.json", "clone/manifest.json"):
        assert (trained_dir / name).is_file()
    rows = list(csv.DictReader(open(trained_dir / "report.csv")))
    assert len(rows) == 4
    assert float(rows[-1]["active_fraction"]) <= 1.0


def test_budget_exit_code_keeps_partial_artifacts(tmp_path):
    out = tmp_path / "b"
    assert main(["train", *FAST, "--max-iters", "5", "--budget", "1750", "--out", str(out)]) == 3
    assert (out / "clone" / "manifest.json").is_file()
    assert json.loads((out / "ledger.json").read_text())["queries_used"] == 1750


def test_evaluate_rows_and_summary(trained_dir, tmp_path, capsys):
    out = tmp_path / "e"
    assert main(["evaluate", "--clone", str(trained_dir / "clone"), "--mode", "3", "--grid", "0:10:0.1",
                 "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "sweep_mode3_pin12.csv")))
    assert len(rows) == 101
    t = np.array([float(r["target"]) for r in rows])
    p = np.array([float(r["prediction"]) for r in rows])
    summary = json.loads((out / "sweep_mode3_pin12.json").read_text())
    rmse = np.sqrt(np.mean((p - t) ** 2))
    assert summary["rmse"] == pytest.approx(rmse)
    assert summary["rel_rmse"] == pytest.approx(rmse / np.ptp(t))
    assert "rel_rmse=" in capsys.readouterr().out


def test_evaluate_single_point(trained_dir, tmp_path):
    out = tmp_path / "e1"
    assert main(["evaluate", "--clone", str(trained_dir / "clone"), "--mode", "3", "--grid", "5",
                 "--out", str(out)]) == 0
    assert len(list(csv.DictReader(open(out / "sweep_mode3_pin12.csv")))) == 1


def test_evaluate_writes_figure(trained_dir, tmp_path):
    out = tmp_path / "fig"
    assert main(["evaluate", "--clone", str(trained_dir / "clone"), "--mode", "2", "--out", str(out)]) == 0
    assert (out / "sweep_mode2_pin11.png").stat().st_size > 0


def test_simplify_leaves_ledger_untouched(trained_dir, tmp_path, capsys):
    ledger = (trained_dir / "ledger.json").read_bytes()
    out = tmp_path / "s"
    assert main(["simplify", "--clone", str(trained_dir / "clone"), "--depth", "3", "--out", str(out)]) == 0
    assert (trained_dir / "ledger.json").read_bytes() == ledger
    before, after = capsys.readouterr().out.split("slots ")[1].split(" -> ")
    assert int(after) <= int(before)
    assert main(["simplify", "--clone", str(trained_dir / "clone"), "--depth", "4", "--out", str(out)]) == 1


def test_explain_formats(trained_dir, tmp_path, capsys):
    out = tmp_path / "x"
    assert main(["explain", "--clone", str(trained_dir / "clone"), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert text.startswith("# ")
    assert all(line.startswith("IF ") for line in text.splitlines()[1:])
    assert main(["explain", "--clone", str(trained_dir / "clone"), "--format", "json", "--out", str(out)]) == 0
    assert json.loads((out / "rules.json").read_text())["rules"]


def test_bench_schema(tmp_path):
    out = tmp_path / "bench"
    assert main(["bench", *FAST, "--max-iters", "6", "--error", "0.05", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "bench.csv")))
    assert list(rows[0]) == ["iter", "active_norm_cum", "baseline_norm_cum", "active_fraction"]
    assert len(rows) == 6
    assert float(rows[-1]["baseline_norm_cum"]) >= float(rows[-1]["active_norm_cum"])
    assert float(rows[0]["baseline_norm_cum"]) == 1.0


def test_bench_rows_hold_after_active_stops():
    active = TrainReport(rows=[{"iteration": 1, "cumulative_work": 5, "active_fraction": 0.0}])
    base = TrainReport(rows=[{"iteration": i, "cumulative_work": 10 * i, "batch_work": 10} for i in (1, 2, 3)])
    rows = bench_rows(active, base)
    assert [r["active_norm_cum"] for r in rows] == [0.5, 0.5, 0.5]
    assert [r["baseline_norm_cum"] for r in rows] == [1.0, 2.0, 3.0]


def test_parse_grid():
    assert len(parse_grid("0:10:0.1")) == 101
    assert parse_grid("1,2.5").tolist() == [1.0, 2.5]
    assert len(parse_grid("0:10")) == 101


def test_train_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["train", *FAST, "--max-iters", "3", "--threads", "1", "--out", str(d)]) == 0
    assert (a / "report.csv").read_bytes() == (b / "report.csv").read_bytes()
    assert (a / "clone" / "manifest.json").read_bytes() == (b / "clone" / "manifest.json").read_bytes()
