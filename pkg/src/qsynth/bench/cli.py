"""``qsynth`` command line.

Exit codes: 0 success, 2 configuration or input error, 3 runtime abort.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..errors import DomainError, GenerationError, TrainingAbort
from .config import ConfigError, ExperimentConfig, load_config
from .report import cmd_report
from .runner import SUITES, SchemaError, cmd_baseline, cmd_bench, cmd_export_targets, cmd_landscape, cmd_train

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 2, 3

log = logging.getLogger("qsynth")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="config file, or a manifest.json to replay")
    p.add_argument("--seed", type=int, help="override the base seed")
    p.add_argument("--out", type=Path, help="output directory (default: experiment.output_dir)")
    p.add_argument("--deterministic", action="store_true", help="single worker process")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="qsynth", description="RL quantum state preparation experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train one run per repetition")
    bench = sub.add_parser("bench", parents=[common], help="fixed-target reconstruction suites")
    bench.add_argument("suite", choices=SUITES)
    bench.add_argument("--checkpoint", type=Path, help="evaluate this policy instead of training")
    sub.add_parser("landscape", parents=[common], help="sweep n and lambda")
    sub.add_parser("baseline", parents=[common], help="classical ansatz baseline")
    report = sub.add_parser("report", parents=[common], help="merge run directories")
    report.add_argument("run_dirs", nargs="*", type=Path)
    report.add_argument("--svg", action="store_true", help="also render SVG charts")
    targets = sub.add_parser("targets", help="target corpus utilities")
    tsub = targets.add_subparsers(dest="targets_command", required=True)
    export = tsub.add_parser("export", parents=[common], help="write a seeded target corpus")
    export.add_argument("--count", type=int, default=16)
    return parser


def _resolve(args) -> tuple[ExperimentConfig, Path]:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.experiment.seed = args.seed
        cfg.baseline.seed = args.seed
    out = args.out or Path(cfg.experiment.output_dir)
    return cfg, out


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose if hasattr(args, "verbose") else 0, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            if args.out is None:
                raise ConfigError("report needs --out")
            rows = cmd_report(args.run_dirs, args.out, svg=args.svg)
            print((args.out / "summary.txt").read_text(), end="")
            log.info("%d configurations summarized", len(rows))
            return EXIT_OK
        cfg, out = _resolve(args)
        if args.command == "train":
            records = cmd_train(cfg, out, args.deterministic)
            for r in records:
                final = f"{r.final.success_rate:.3f}" if r.final else "n/a"
                print(f"{r.run_id} seed={r.seed} success={final} wall={r.wall_clock_seconds:.1f}s")
        elif args.command == "bench":
            rows = cmd_bench(args.suite, cfg, out, args.checkpoint, args.deterministic)
            for row in rows:
                print(",".join(row.as_csv()))
        elif args.command == "landscape":
            cells = cmd_landscape(cfg, out, args.deterministic)
            print(f"{len(cells)} cells written to {out}")
        elif args.command == "baseline":
            report = cmd_baseline(cfg, out)
            print(f"mean_fidelity={report.mean:.6f} min_fidelity={report.min:.6g} targets={len(report.rows)}")
        elif args.command == "targets":
            path = out if out.suffix else out / "targets.txt"
            digest = cmd_export_targets(cfg, path, args.count)
            print(f"{path} {digest}")
        return EXIT_OK
    except (ConfigError, SchemaError, DomainError) as exc:
        print(f"qsynth: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAbort, GenerationError) as exc:
        detail = f" (checkpoint saved to {exc.checkpoint})" if getattr(exc, "checkpoint", None) else ""
        print(f"qsynth: aborted: {exc}{detail}", file=sys.stderr)
        return EXIT_ABORT


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
