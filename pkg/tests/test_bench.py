import csv
import json
import math

import numpy as np
import pytest

from qsynth.bench.cli import run
from qsynth.bench.config import ConfigError, load_config, parse_config
from qsynth.bench.report import SUMMARY_HEADER, cmd_report, svg_chart
from qsynth.bench.runner import (
    AGG_HEADER,
    BENCH_HEADER,
    TIDY_HEADER,
    SchemaError,
    cmd_baseline,
    cmd_bench,
    cmd_landscape,
    cmd_train,
    git_blob_hash,
    sha256_file,
    suite_targets,
    worker_count,
)
from qsynth.bench.stats import mean_ci
from qsynth.train import TWO_STAGE_LR, METRICS_HEADER

TINY = """
[experiment]
seed = 5
repetitions = {reps}
eval_episodes = 8
eval_targets = 3

[env]
n = 2
lam = 1

[ppo]
total_steps = 512
horizon = 32
env_count = 4

[landscape]
lambda_list = 1, 2
n_list = 2
"""


def tiny(tmp_path, reps=2, extra=""):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY.format(reps=reps) + extra)
    return load_config(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestStats:
    def test_interval(self):
        iv = mean_ci([1.0, 2.0, 3.0])
        half = 1.96 * 1.0 / math.sqrt(3)
        assert iv.mean == 2.0
        assert iv.low == pytest.approx(2 - half) and iv.high == pytest.approx(2 + half)
        assert not iv.degenerate

    def test_single_value_degenerate(self):
        iv = mean_ci([0.7])
        assert iv.degenerate and iv.low == iv.high == 0.7

    def test_empty(self):
        with pytest.raises(ValueError):
            mean_ci([])

    def test_mean_is_arithmetic(self, rng):
        xs = rng.random(7)
        iv = mean_ci(xs)
        assert abs(iv.mean - xs.mean()) < 1e-12
        assert iv.low <= iv.mean <= iv.high


class TestConfig:
    def test_defaults(self):
        cfg = load_config(None)
        assert cfg.experiment.repetitions == 3
        assert cfg.ppo.lr == 5e-4 and cfg.ppo.total_steps == 200_000
        assert cfg.baseline.targets == 10 and cfg.baseline.steps == 300

    def test_two_stage_default_lr(self):
        cfg = parse_config("[experiment]\nmode = two-stage\n")
        assert cfg.ppo.lr == TWO_STAGE_LR
        cfg = parse_config("[experiment]\nmode = two-stage\n[ppo]\nlr = 0.002\n")
        assert cfg.ppo.lr == 0.002

    @pytest.mark.parametrize(
        "text, line, fragment",
        [
            ("[env]\nn = 2\nlam = two\n", 3, "lam"),
            ("[env]\nlam = 0\n", 2, "lambda"),
            ("[ppo]\n\nbogus = 1\n", 3, "unknown key"),
            ("[extra]\nx = 1\n", 1, "unknown section"),
            ("n = 2\n", 1, "section"),
            ("[experiment]\nrepetitions = 0\n", 2, "repetitions"),
            ("[ppo]\nclip_ratio = 1.5\n", 2, "clip_ratio"),
            ("[landscape]\nlambda_list = 1, x\n", 2, "lambda_list"),
            ("[ppo]\nepochs = 1\nepochs = 2\n", 3, "duplicate"),
        ],
    )
    def test_line_diagnostics(self, text, line, fragment):
        with pytest.raises(ConfigError) as info:
            parse_config(text, "exp.ini")
        assert info.value.line == line
        assert fragment in str(info.value)
        assert str(info.value).startswith(f"exp.ini:{line}:")

    def test_missing_corpus(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("[experiment]\neval_targets = missing.txt\n")
        with pytest.raises(ConfigError) as info:
            load_config(path)
        assert info.value.line == 2

    def test_manifest_round_trip(self, tmp_path):
        cfg = parse_config("[experiment]\nmode = two-stage\nseed = 9\n[env]\nlam = 3\n")
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps({"config": cfg.to_dict()}))
        again = load_config(path)
        assert again.to_dict() == cfg.to_dict()


class TestRunner:
    def test_train_artifacts(self, tmp_path):
        out = tmp_path / "fresh" / "nested"
        records = cmd_train(tiny(tmp_path, reps=3), out, deterministic=True)
        assert [r.seed for r in records] == [5, 6, 7]
        for rep in range(3):
            rows = read_csv(out / f"run_{rep}" / "metrics.csv")
            assert tuple(rows[0]) == METRICS_HEADER
            assert (out / f"run_{rep}" / "checkpoint.txt").is_file()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seeds"] == [5, 6, 7]
        listed = set(manifest["files"])
        on_disk = {p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file() and p.name != "manifest.json"}
        assert listed == on_disk
        for rel, digest in manifest["files"].items():
            assert sha256_file(out / rel) == digest
        corpus = (out / "eval_corpus.txt").read_bytes()
        assert manifest["corpus"]["git_hash"] == git_blob_hash(corpus)

    def test_rerun_identical(self, tmp_path):
        cfg = tiny(tmp_path, reps=1)
        cmd_train(cfg, tmp_path / "a", deterministic=True)
        cmd_train(cfg, tmp_path / "b", deterministic=True)
        assert (tmp_path / "a/run_0/metrics.csv").read_bytes() == (tmp_path / "b/run_0/metrics.csv").read_bytes()

    def test_parallel_matches_serial(self, tmp_path, monkeypatch):
        cfg = tiny(tmp_path, reps=2)
        cmd_train(cfg, tmp_path / "serial", deterministic=True)
        monkeypatch.setenv("QSYNTH_THREADS", "2")
        cmd_train(cfg, tmp_path / "parallel")
        for rep in range(2):
            a = (tmp_path / f"serial/run_{rep}/metrics.csv").read_bytes()
            assert a == (tmp_path / f"parallel/run_{rep}/metrics.csv").read_bytes()

    def test_worker_count(self, monkeypatch):
        monkeypatch.setenv("QSYNTH_THREADS", "3")
        assert worker_count(8, deterministic=False) == 3
        assert worker_count(2, deterministic=False) == 2
        assert worker_count(8, deterministic=True) == 1
        monkeypatch.setenv("QSYNTH_THREADS", "many")
        with pytest.raises(ConfigError):
            worker_count(2, deterministic=False)

    def test_git_blob_hash(self):
        # object id of an empty blob and of "hello\n", as printed by git hash-object
        assert git_blob_hash(b"") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"
        assert git_blob_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"

    def test_bell_suite_targets(self):
        s = 1 / math.sqrt(2)
        expected = {
            "phi+": [s, 0, 0, s], "phi-": [s, 0, 0, -s],
            "psi+": [0, s, s, 0], "psi-": [0, s, -s, 0],
        }  # fmt: skip
        got = suite_targets("bell")
        assert set(got) == set(expected)
        for label, amps in expected.items():
            np.testing.assert_allclose(got[label].amps, amps, atol=1e-15)

    def test_bench_single_rep_degenerate(self, tmp_path):
        rows = cmd_bench("basis", tiny(tmp_path, reps=1), tmp_path / "bench", deterministic=True)
        assert [r.target for r in rows] == ["00", "01", "10", "11"]
        table = read_csv(tmp_path / "bench" / "bench_basis.csv")
        assert tuple(table[0]) == BENCH_HEADER
        assert all(r[6] == "true" for r in table[1:])
        assert all(float(r[4]) <= float(r[3]) <= float(r[5]) for r in table[1:])

    def test_bench_from_checkpoint(self, tmp_path):
        cfg = tiny(tmp_path, reps=2)
        cmd_train(cfg, tmp_path / "t", deterministic=True)
        rows = cmd_bench("bell", cfg, tmp_path / "b", checkpoint=tmp_path / "t/run_0/checkpoint.txt")
        assert len(rows) == 4 and all(len(r.successes) == 2 for r in rows)
        manifest = json.loads((tmp_path / "b/manifest.json").read_text())
        assert manifest["checkpoint_sha256"] == sha256_file(tmp_path / "t/run_0/checkpoint.txt")

    def test_landscape(self, tmp_path):
        out = tmp_path / "land"
        cells = cmd_landscape(tiny(tmp_path, reps=2), out, deterministic=True)
        assert [(c.n, c.lam) for c in cells] == [(2, 1), (2, 2)]
        tidy = read_csv(out / "landscape_tidy.csv")
        agg = read_csv(out / "landscape_summary.csv")
        assert tuple(tidy[0]) == TIDY_HEADER and tuple(agg[0]) == AGG_HEADER
        assert len(tidy) == 5 and len(agg) == 3
        for row in agg[1:]:
            finals = [float(t[5]) for t in tidy[1:] if t[1:3] == row[1:3]]
            assert abs(float(row[4]) - sum(finals) / len(finals)) < 1e-12
            assert float(row[10]) > 0

    def test_baseline(self, tmp_path):
        cfg = parse_config("[baseline]\ntargets = 3\nsteps = 5\n")
        a = cmd_baseline(cfg, tmp_path / "a")
        cmd_baseline(cfg, tmp_path / "b")
        assert len(a.rows) == 3
        assert (tmp_path / "a/baseline.csv").read_bytes() == (tmp_path / "b/baseline.csv").read_bytes()
        header = read_csv(tmp_path / "a/baseline.csv")[0]
        assert header == ["target_id", "seed", "initial_fidelity", "final_fidelity", "steps_used"]
        summary = (tmp_path / "a/baseline_summary.txt").read_text()
        assert f"mean_fidelity {a.mean:.17g}" in summary


class TestReport:
    @pytest.fixture
    def runs(self, tmp_path):
        out = tmp_path / "runs"
        cmd_train(tiny(tmp_path, reps=2), out, deterministic=True)
        return out

    def test_summary_and_series(self, runs, tmp_path):
        rows = cmd_report([runs], tmp_path / "rep", svg=True)
        assert len(rows) == 1
        table = read_csv(tmp_path / "rep/summary.csv")
        assert tuple(table[0]) == SUMMARY_HEADER
        series = read_csv(tmp_path / "rep/series/runs_success_rate.csv")
        assert series[0] == ["step", "mean", "ci_low", "ci_high"]
        for step, mean, low, high in series[1:]:
            assert float(low) <= float(mean) <= float(high)
        svg = (tmp_path / "rep/series/runs_success_rate.svg").read_text()
        assert svg.startswith("<svg") and "polyline" in svg

    def test_idempotent(self, runs, tmp_path):
        cmd_report([runs], tmp_path / "r1", svg=True)
        before = {p.name: p.read_bytes() for p in (tmp_path / "r1").rglob("*") if p.is_file()}
        cmd_report([runs], tmp_path / "r1", svg=True)
        after = {p.name: p.read_bytes() for p in (tmp_path / "r1").rglob("*") if p.is_file()}
        assert before == after

    def test_schema_mismatch(self, runs, tmp_path):
        (runs / "run_1" / "metrics.csv").write_text("step,fidelity\n1,0.5\n")
        with pytest.raises(SchemaError):
            cmd_report([runs], tmp_path / "rep")

    def test_empty_list(self, tmp_path):
        with pytest.raises(ConfigError):
            cmd_report([], tmp_path / "rep")

    def test_svg_single_point(self):
        svg = svg_chart("t", [(10, mean_ci([0.5]))])
        assert svg.count("<circle") == 1


class TestCli:
    def test_train_and_report(self, tmp_path, capsys):
        (tmp_path / "c.ini").write_text(TINY.format(reps=1))
        assert run(["train", "--config", str(tmp_path / "c.ini"), "--out", str(tmp_path / "o"), "--seed", "2", "--deterministic"]) == 0
        assert "seed=2" in capsys.readouterr().out
        assert run(["report", str(tmp_path / "o"), "--out", str(tmp_path / "r")]) == 0

    def test_config_error_exit_code(self, tmp_path, capsys):
        (tmp_path / "bad.ini").write_text("[env]\nlam = nope\n")
        assert run(["train", "--config", str(tmp_path / "bad.ini")]) == 2
        assert "bad.ini:2" in capsys.readouterr().err

    def test_report_schema_exit_code(self, tmp_path):
        (tmp_path / "x" / "run_0").mkdir(parents=True)
        (tmp_path / "x" / "run_0" / "metrics.csv").write_text("a,b\n")
        assert run(["report", str(tmp_path / "x"), "--out", str(tmp_path / "r")]) == 2

    def test_abort_exit_code(self, tmp_path, monkeypatch):
        from qsynth.bench import runner
        from qsynth.errors import TrainingAbort

        def boom(*a, **k):
            raise TrainingAbort("non-finite loss nan")

        monkeypatch.setattr(runner, "train", boom)
        (tmp_path / "c.ini").write_text(TINY.format(reps=1))
        assert run(["train", "--config", str(tmp_path / "c.ini"), "--out", str(tmp_path / "o"), "--deterministic"]) == 3

    def test_targets_export(self, tmp_path, capsys):
        out = tmp_path / "t.txt"
        assert run(["targets", "export", "--out", str(out), "--count", "3", "--seed", "4"]) == 0
        text = out.read_text()
        assert text.splitlines()[0] == "2 2 4"
        assert git_blob_hash(text.encode()) in capsys.readouterr().out
