"""Experiment commands: training runs, benchmark suites, sweeps and the classical baseline.

Each command writes its artifacts under an output directory and finishes by
writing ``manifest.json``, which lists every artifact with its SHA-256 and
records the resolved configuration, the seeds and the evaluation corpus hash.
"""
from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import __version__
from ..env import EnvConfig, TargetSpec, basis_targets, bell_targets, format_corpus, generate_corpus, load_corpus
from ..errors import DomainError
from ..policy import load_params, save_params
from ..refine import BaselineReport, classical_baseline
from ..statevector import StateVector
from ..train import METRICS_HEADER, MetricsRow, RunConfig, evaluate_policy, train
from .config import ConfigError, ExperimentConfig
from .stats import mean_ci

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
CORPUS_NAME = "eval_corpus.txt"
RUNS_HEADER = ("run_id", "seed", "final_step", "final_success_rate", "final_mean_fidelity", "final_mean_rcd", "wall_clock_seconds")
BENCH_HEADER = ("suite", "target", "repetitions", "success_mean", "success_ci_low", "success_ci_high", "degenerate", "det_success_mean")
TIDY_HEADER = ("mode", "n", "lam", "rep", "seed", "final_success_rate", "final_mean_rcd", "final_mean_fidelity", "wall_clock_seconds")
AGG_HEADER = (
    "mode", "n", "lam", "repetitions",
    "success_mean", "success_ci_low", "success_ci_high",
    "rcd_mean", "rcd_ci_low", "rcd_ci_high",
    "wall_clock_mean", "degenerate",
)  # fmt: skip
BASELINE_HEADER = BaselineReport.CSV_HEADER


def fmt(x: float) -> str:
    return f"{x:.17g}"


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def git_blob_hash(data: bytes) -> str:
    """The object id git would assign to ``data`` as a blob."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def worker_count(jobs: int, deterministic: bool) -> int:
    if deterministic:
        return 1
    cap = os.environ.get("QSYNTH_THREADS")
    limit = os.cpu_count() or 1
    if cap:
        try:
            limit = max(1, int(cap))
        except ValueError:
            raise ConfigError(f"QSYNTH_THREADS must be an integer, got {cap!r}") from None
    return max(1, min(limit, jobs))


@dataclass
class RunRecord:
    run_id: str
    seed: int
    rows: list[MetricsRow]
    wall_clock_seconds: float

    @property
    def final(self) -> MetricsRow | None:
        return self.rows[-1] if self.rows else None


@dataclass
class RunJob:
    run_id: str
    run: RunConfig
    directory: Path
    checkpoint: bool = True


def _execute(job: RunJob) -> RunRecord:
    job.directory.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    result = train(job.run, metrics_path=job.directory / "metrics.csv")
    elapsed = time.perf_counter() - start
    if job.checkpoint:
        save_params(result.params, job.directory / "checkpoint.txt")
    return RunRecord(job.run_id, job.run.seed, result.metrics, elapsed)


def execute_jobs(jobs: Sequence[RunJob], deterministic: bool) -> list[RunRecord]:
    workers = worker_count(len(jobs), deterministic)
    if workers == 1:
        return [_execute(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_execute, jobs))


def _eval_corpus(cfg: ExperimentConfig, env: EnvConfig) -> list[TargetSpec]:
    path = cfg.corpus_path
    if path is not None:
        specs = [spec for _, spec in load_corpus(path)]
        if any(s.state.n != env.n for s in specs):
            raise ConfigError(f"corpus {str(path)!r} does not match n={env.n}")
        return specs
    return [spec for _, spec in generate_corpus(env, cfg.eval_target_count, base_seed=cfg.experiment.seed)]


def _write_corpus(out: Path, specs: list[TargetSpec], seed: int) -> dict:
    entries = [(seed + i, s) for i, s in enumerate(specs) if s.reference is not None]
    if len(entries) != len(specs):
        return {"path": None, "git_hash": None}
    text = format_corpus(entries).encode()
    (out / CORPUS_NAME).write_bytes(text)
    return {"path": CORPUS_NAME, "git_hash": git_blob_hash(text)}


def _run_config(cfg: ExperimentConfig, env: EnvConfig, seed: int, target=None, eval_targets=None, mode=None) -> RunConfig:
    exp = cfg.experiment
    return RunConfig(
        env=env,
        mode=mode or exp.mode,
        seed=seed,
        ppo=cfg.ppo,
        a2c=cfg.a2c,
        refine=cfg.refine,
        target=target,
        eval_targets=eval_targets,
        eval_target_count=cfg.eval_target_count or 16,
        eval_episodes=exp.eval_episodes,
        eval_every=exp.eval_every or None,
        hidden=exp.hidden,
    )


def named_target(label: str, env: EnvConfig) -> TargetSpec:
    """Resolve a fixed target label such as ``00`` or ``phi+``."""
    table = dict(bell_targets()) if env.n == 2 else {}
    table.update(basis_targets(env.n))
    if label not in table:
        raise ConfigError(f"unknown target {label!r}; choose from {', '.join(table)}")
    return TargetSpec(table[label], None, env.lam, label)


def write_runs_table(path: Path, records: Sequence[RunRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RUNS_HEADER)
        for r in records:
            f = r.final
            if f is None:
                w.writerow([r.run_id, r.seed, 0, "", "", "", fmt(r.wall_clock_seconds)])
            else:
                w.writerow([r.run_id, r.seed, f.step, fmt(f.success_rate), fmt(f.mean_fidelity), fmt(f.mean_rcd), fmt(r.wall_clock_seconds)])


def write_manifest(out: Path, command: str, cfg: ExperimentConfig, seeds: list[int], extra: dict | None = None) -> Path:
    files = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != MANIFEST_NAME:
            files[p.relative_to(out).as_posix()] = sha256_file(p)
    manifest = {
        "qsynth_version": __version__,
        "command": command,
        "config": cfg.to_dict(),
        "seeds": seeds,
        "files": files,
    }
    manifest.update(extra or {})
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def cmd_train(cfg: ExperimentConfig, out: Path, deterministic: bool = False) -> list[RunRecord]:
    """One training run per repetition, seeded ``seed + rep``."""
    if cfg.mode == "baseline":
        raise ConfigError("mode = baseline is run with the 'baseline' command")
    out.mkdir(parents=True, exist_ok=True)
    env = cfg.env_config()
    exp = cfg.experiment
    target = named_target(exp.target, env) if exp.target else None
    corpus = _eval_corpus(cfg, env) if target is None else [target]
    if target is not None:
        corpus_info = {"path": None, "git_hash": None}
    elif cfg.corpus_path is not None:
        corpus_info = {"path": str(cfg.corpus_path), "git_hash": git_blob_hash(cfg.corpus_path.read_bytes())}
    else:
        corpus_info = _write_corpus(out, corpus, exp.seed)
    seeds = [exp.seed + rep for rep in range(exp.repetitions)]
    jobs = []
    for rep, seed in enumerate(seeds):
        run = _run_config(cfg, env, seed, target=target, eval_targets=None if target else corpus)
        if exp.checkpoint_every:
            run.checkpoint_dir = out / f"run_{rep}"
            run.checkpoint_every = exp.checkpoint_every
        jobs.append(RunJob(f"run_{rep}", run, out / f"run_{rep}"))
    records = execute_jobs(jobs, deterministic)
    write_runs_table(out / "runs.csv", records)
    write_manifest(
        out, "train", cfg, seeds,
        {"corpus": corpus_info, "wall_clock_seconds": {r.run_id: r.wall_clock_seconds for r in records}},
    )  # fmt: skip
    return records


SUITES = ("basis", "bell")


def suite_targets(suite: str) -> dict[str, StateVector]:
    if suite == "basis":
        return basis_targets(2)
    if suite == "bell":
        return bell_targets()
    raise ConfigError(f"unknown suite {suite!r}; choose basis or bell")


@dataclass
class BenchRow:
    suite: str
    target: str
    successes: list[float]
    det_successes: list[float]

    def as_csv(self) -> list[str]:
        ci = mean_ci(self.successes)
        det = float(np.mean(self.det_successes))
        return [self.suite, self.target, str(ci.count), fmt(ci.mean), fmt(ci.low), fmt(ci.high), str(ci.degenerate).lower(), fmt(det)]


def cmd_bench(
    suite: str, cfg: ExperimentConfig, out: Path, checkpoint: Path | None = None, deterministic: bool = False
) -> list[BenchRow]:
    """Success rate per fixed target, trained from scratch or from a checkpoint."""
    if cfg.mode not in ("one-stage", "two-stage", "a2c"):
        raise ConfigError(f"bench needs a training mode, not {cfg.mode!r}")
    targets = suite_targets(suite)
    out.mkdir(parents=True, exist_ok=True)
    env = cfg.env_config(n=2)
    exp = cfg.experiment
    seeds = [exp.seed + rep for rep in range(exp.repetitions)]
    rows = []
    if checkpoint is not None:
        params = load_params(checkpoint)
        if params.n != 2:
            raise ConfigError(f"checkpoint {str(checkpoint)!r} is for n={params.n}, suites need n=2")
        for label, state in targets.items():
            spec = TargetSpec(state, None, env.lam, label)
            run = _run_config(cfg, env, exp.seed, target=spec)
            stoch, det = [], []
            for seed in seeds:
                eps = evaluate_policy(params, run, [spec], exp.eval_episodes, seed)
                stoch.append(float(np.mean([e.success for e in eps])))
                det.append(float(evaluate_policy(params, run, [spec], 1, seed, deterministic=True)[0].success))
            rows.append(BenchRow(suite, label, stoch, det))
        wall = {}
    else:
        jobs = []
        for label, state in targets.items():
            spec = TargetSpec(state, None, env.lam, label)
            for rep, seed in enumerate(seeds):
                run = _run_config(cfg, env, seed, target=spec)
                jobs.append(RunJob(f"{label}/run_{rep}", run, out / _safe(label) / f"run_{rep}"))
        records = execute_jobs(jobs, deterministic)
        wall = {r.run_id: r.wall_clock_seconds for r in records}
        per_target = len(seeds)
        for k, label in enumerate(targets):
            chunk = records[k * per_target : (k + 1) * per_target]
            rows.append(
                BenchRow(
                    suite, label,
                    [r.final.success_rate if r.final else 0.0 for r in chunk],
                    [r.final.det_success_rate if r.final else 0.0 for r in chunk],
                )
            )  # fmt: skip
            write_runs_table(out / _safe(label) / "runs.csv", chunk)
    with open(out / f"bench_{suite}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BENCH_HEADER)
        for row in rows:
            w.writerow(row.as_csv())
    extra = {"suite": suite, "checkpoint": str(checkpoint) if checkpoint else None, "wall_clock_seconds": wall}
    if checkpoint is not None:
        extra["checkpoint_sha256"] = sha256_file(checkpoint)
    write_manifest(out, f"bench {suite}", cfg, seeds, extra)
    return rows


def _safe(label: str) -> str:
    return label.replace("+", "plus").replace("-", "minus")


@dataclass
class CellResult:
    n: int
    lam: int
    records: list[RunRecord]

    def finals(self, attr: str) -> list[float]:
        return [getattr(r.final, attr) if r.final else float("nan") for r in self.records]


def cmd_landscape(cfg: ExperimentConfig, out: Path, deterministic: bool = False) -> list[CellResult]:
    """Sweep every (n, lambda) cell; tidy and aggregated CSVs with CIs and wall clock."""
    if cfg.mode == "baseline":
        raise ConfigError("landscape needs a training mode")
    out.mkdir(parents=True, exist_ok=True)
    exp = cfg.experiment
    seeds = [exp.seed + rep for rep in range(exp.repetitions)]
    cells = list(itertools.product(cfg.n_list, cfg.lambda_list))
    jobs = []
    corpus_hashes = {}
    for n, lam in cells:
        env = cfg.env_config(n=n, lam=lam)
        cell_dir = out / f"n{n}_lam{lam}"
        cell_dir.mkdir(parents=True, exist_ok=True)
        corpus = [s for _, s in generate_corpus(env, cfg.eval_target_count or 16, base_seed=exp.seed)]
        corpus_hashes[cell_dir.name] = _write_corpus(cell_dir, corpus, exp.seed)["git_hash"]
        for rep, seed in enumerate(seeds):
            run = _run_config(cfg, env, seed, eval_targets=corpus)
            jobs.append(RunJob(f"{cell_dir.name}/run_{rep}", run, cell_dir / f"run_{rep}", checkpoint=False))
    records = execute_jobs(jobs, deterministic)
    results = []
    per_cell = len(seeds)
    for k, (n, lam) in enumerate(cells):
        chunk = records[k * per_cell : (k + 1) * per_cell]
        results.append(CellResult(n, lam, chunk))
        write_runs_table(out / f"n{n}_lam{lam}" / "runs.csv", chunk)

    with open(out / "landscape_tidy.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TIDY_HEADER)
        for cell in results:
            for rep, r in enumerate(cell.records):
                f = r.final
                w.writerow([
                    cfg.mode, cell.n, cell.lam, rep, r.seed,
                    fmt(f.success_rate) if f else "", fmt(f.mean_rcd) if f else "", fmt(f.mean_fidelity) if f else "",
                    fmt(r.wall_clock_seconds),
                ])  # fmt: skip
    with open(out / "landscape_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(AGG_HEADER)
        for cell in results:
            if not all(r.final for r in cell.records):
                continue
            s = mean_ci(cell.finals("success_rate"))
            d = mean_ci(cell.finals("mean_rcd"))
            wall = mean_ci([r.wall_clock_seconds for r in cell.records]).mean
            w.writerow([
                cfg.mode, cell.n, cell.lam, s.count, fmt(s.mean), fmt(s.low), fmt(s.high),
                fmt(d.mean), fmt(d.low), fmt(d.high), fmt(wall), str(s.degenerate).lower(),
            ])  # fmt: skip
    write_manifest(
        out, "landscape", cfg, seeds,
        {"corpus": corpus_hashes, "wall_clock_seconds": {r.run_id: r.wall_clock_seconds for r in records}},
    )  # fmt: skip
    return results


def baseline_targets(cfg: ExperimentConfig) -> list[tuple[int, TargetSpec]]:
    b = cfg.baseline
    env = EnvConfig(n=b.n, lam=b.lam, epsilon=cfg.env.epsilon)
    return generate_corpus(env, b.targets, base_seed=b.seed)


def cmd_baseline(cfg: ExperimentConfig, out: Path) -> BaselineReport:
    """Hardware-efficient ansatz with Adam on seeded random targets."""
    b = cfg.baseline
    if b.targets < 1 or b.steps < 0:
        raise ConfigError("[baseline] targets must be >= 1 and steps >= 0")
    out.mkdir(parents=True, exist_ok=True)
    entries = baseline_targets(cfg)
    text = format_corpus(entries).encode()
    (out / "baseline_targets.txt").write_bytes(text)
    start = time.perf_counter()
    try:
        report = classical_baseline([s.state for _, s in entries], steps=b.steps, lr=b.lr, seed=b.seed, layers=b.layers, init=b.init)
    except DomainError as exc:
        raise ConfigError(f"[baseline] {exc}") from None
    elapsed = time.perf_counter() - start
    with open(out / "baseline.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BASELINE_HEADER)
        w.writerows(report.to_rows())
    (out / "baseline_summary.txt").write_text(
        f"targets {len(report.rows)}\nsteps {b.steps}\nmean_fidelity {fmt(report.mean)}\nmin_fidelity {fmt(report.min)}\n"
    )
    write_manifest(
        out, "baseline", cfg, [b.seed + i for i in range(b.targets)],
        {"corpus": {"path": "baseline_targets.txt", "git_hash": git_blob_hash(text)}, "wall_clock_seconds": elapsed},
    )  # fmt: skip
    return report


def cmd_export_targets(cfg: ExperimentConfig, path: Path, count: int) -> str:
    entries = generate_corpus(cfg.env_config(), count, base_seed=cfg.experiment.seed)
    text = format_corpus(entries)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return git_blob_hash(text.encode())


def read_metrics(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != METRICS_HEADER:
            raise SchemaError(f"{path}: metrics header {header} does not match {list(METRICS_HEADER)}")
        return [dict(zip(header, row)) for row in reader]


class SchemaError(ValueError):
    pass

