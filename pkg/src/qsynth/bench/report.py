"""Merge run directories into summary tables, plot-ready series and SVG charts."""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

from .config import ConfigError
from .runner import SchemaError, fmt, read_metrics
from .stats import Interval, mean_ci

SERIES_METRICS = ("success_rate", "mean_fidelity", "mean_rcd", "mean_ep_len")
SUMMARY_HEADER = (
    "config", "runs", "final_step",
    "success_mean", "success_ci_low", "success_ci_high",
    "fidelity_mean", "fidelity_ci_low", "fidelity_ci_high",
    "rcd_mean", "rcd_ci_low", "rcd_ci_high",
    "det_success_mean", "degenerate",
)  # fmt: skip
SERIES_HEADER = ("step", "mean", "ci_low", "ci_high")


@dataclass
class Group:
    label: str
    runs: list[list[dict[str, str]]]

    def finals(self, metric: str) -> list[float]:
        return [float(run[-1][metric]) for run in self.runs]

    def series(self, metric: str) -> list[tuple[int, Interval]]:
        """Per-step interval over the runs, on the steps every run evaluated."""
        by_step = [{int(r["step"]): float(r[metric]) for r in run} for run in self.runs]
        common = sorted(set.intersection(*(set(d) for d in by_step)))
        return [(step, mean_ci([d[step] for d in by_step])) for step in common]


def collect_groups(run_dirs: Sequence[str | Path]) -> list[Group]:
    """One group per directory that holds ``run_*`` subdirectories (or per bare run dir)."""
    if not run_dirs:
        raise ConfigError("report needs at least one run directory")
    groups: dict[str, list[list[dict[str, str]]]] = {}
    for d in map(Path, run_dirs):
        if not d.is_dir():
            raise ConfigError(f"{d} is not a directory")
        files = sorted(d.rglob("metrics.csv"))
        if not files:
            raise ConfigError(f"{d} contains no metrics.csv")
        for f in files:
            parent = f.parent.parent
            label = d.name if parent == d.parent else parent.relative_to(d.parent).as_posix()
            rows = read_metrics(f)
            if rows:
                groups.setdefault(label, []).append(rows)
    return [Group(label, runs) for label, runs in sorted(groups.items())]


def _slug(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", label).strip("_") or "run"


def summary_rows(groups: Sequence[Group]) -> list[list[str]]:
    rows = []
    for g in groups:
        s = mean_ci(g.finals("success_rate"))
        f = mean_ci(g.finals("mean_fidelity"))
        r = mean_ci(g.finals("mean_rcd"))
        det = mean_ci(g.finals("det_success_rate")).mean
        step = max(int(run[-1]["step"]) for run in g.runs)
        rows.append([
            g.label, str(len(g.runs)), str(step),
            fmt(s.mean), fmt(s.low), fmt(s.high),
            fmt(f.mean), fmt(f.low), fmt(f.high),
            fmt(r.mean), fmt(r.low), fmt(r.high),
            fmt(det), str(s.degenerate).lower(),
        ])  # fmt: skip
    return rows


def text_table(rows: list[list[str]]) -> str:
    cols = ("config", "runs", "step", "success", "95% CI", "fidelity", "rcd", "det")
    body = []
    for r in rows:
        body.append([
            r[0], r[1], r[2], f"{float(r[3]):.3f}", f"[{float(r[4]):.3f}, {float(r[5]):.3f}]",
            f"{float(r[6]):.4f}", f"{float(r[9]):.1f}", f"{float(r[12]):.3f}",
        ])  # fmt: skip
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body)
    for r in rows:
        if r[13] == "true":
            lines.append(f"note: {r[0]} has a single run; its interval is degenerate")
    return "\n".join(lines) + "\n"


def svg_chart(title: str, series: list[tuple[int, Interval]], width: int = 480, height: int = 300) -> str:
    """Mean line over a shaded interval band, with labelled axes."""
    left, right, top, bottom = 60, 20, 30, 40
    steps = [s for s, _ in series]
    lows = [iv.low for _, iv in series]
    highs = [iv.high for _, iv in series]
    x0, x1 = min(steps), max(steps)
    y0, y1 = min(lows), max(highs)
    if x1 == x0:
        x1 = x0 + 1
    if y1 - y0 < 1e-12:
        y0, y1 = y0 - 0.5, y1 + 0.5

    def px(x):
        return left + (x - x0) / (x1 - x0) * (width - left - right)

    def py(y):
        return height - bottom - (y - y0) / (y1 - y0) * (height - top - bottom)

    band = [(px(s), py(iv.high)) for s, iv in series] + [(px(s), py(iv.low)) for s, iv in reversed(series)]
    line = [(px(s), py(iv.mean)) for s, iv in series]
    pts = lambda ps: " ".join(f"{x:.2f},{y:.2f}" for x, y in ps)  # noqa: E731
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="18" text-anchor="middle" font-family="sans-serif" font-size="13">{escape(title)}</text>',
        f'<line x1="{left}" y1="{height - bottom}" x2="{width - right}" y2="{height - bottom}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{height - bottom}" stroke="black"/>',
    ]
    for frac in (0.0, 0.5, 1.0):
        yv = y0 + frac * (y1 - y0)
        xv = x0 + frac * (x1 - x0)
        parts.append(
            f'<text x="{left - 6}" y="{py(yv) + 4:.2f}" text-anchor="end" font-family="sans-serif" font-size="10">{yv:.3g}</text>'
        )
        parts.append(
            f'<text x="{px(xv):.2f}" y="{height - bottom + 14}" text-anchor="middle" font-family="sans-serif" font-size="10">{xv:.0f}</text>'
        )
    parts.append(
        f'<text x="{(left + width - right) / 2:.0f}" y="{height - 8}" text-anchor="middle" font-family="sans-serif" font-size="11">env steps</text>'
    )
    if len(series) > 1:
        parts.append(f'<polygon points="{pts(band)}" fill="#4878d0" fill-opacity="0.25" stroke="none"/>')
    parts.append(f'<polyline points="{pts(line)}" fill="none" stroke="#4878d0" stroke-width="2"/>')
    for x, y in line:
        parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="2.5" fill="#4878d0"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_report(run_dirs: Sequence[str | Path], out: Path, svg: bool = False) -> list[list[str]]:
    """Write ``summary.csv``, ``summary.txt`` and ``series/<config>_<metric>.csv`` (plus SVGs)."""
    groups = collect_groups(run_dirs)
    out.mkdir(parents=True, exist_ok=True)
    rows = summary_rows(groups)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_HEADER)
        w.writerows(rows)
    (out / "summary.txt").write_text(text_table(rows))
    series_dir = out / "series"
    series_dir.mkdir(exist_ok=True)
    for g in groups:
        for metric in SERIES_METRICS:
            series = g.series(metric)
            with open(series_dir / f"{_slug(g.label)}_{metric}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(SERIES_HEADER)
                for step, iv in series:
                    w.writerow([step, fmt(iv.mean), fmt(iv.low), fmt(iv.high)])
            if svg and series:
                (series_dir / f"{_slug(g.label)}_{metric}.svg").write_text(svg_chart(f"{g.label}: {metric}", series))
    return rows


__all__ = ["cmd_report", "collect_groups", "svg_chart", "SchemaError"]
