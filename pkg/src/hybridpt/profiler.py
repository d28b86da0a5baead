"""Per-stage parameter and latency breakdowns, and their text/json/csv renderings."""

from __future__ import annotations

import contextlib
import csv
import io
import json
import os
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone

import numpy as np

from .network import ModelConfig, ModelWeights, build_hierarchy, count_params, forward
from .pointcloud import PointBatch

SCHEMA_VERSION = 1
ROW_FIELDS = ("stage", "module", "params", "time_us", "param_fraction", "time_fraction")


class ProfileError(RuntimeError):
    pass


@dataclass
class ProfileRow:
    stage: str
    module: str
    params: int
    time_us: float | None = None
    param_fraction: float = 0.0
    time_fraction: float | None = None


@dataclass
class ProfileReport:
    rows: list[ProfileRow]
    meta: dict = field(default_factory=dict)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_time_us(self) -> float | None:
        if any(r.time_us is None for r in self.rows):
            return None
        return float(sum(r.time_us for r in self.rows))

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "meta": dict(self.meta),
                "rows": [asdict(r) for r in self.rows],
                "total_params": self.total_params, "total_time_us": self.total_time_us}


def git_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             timeout=5, cwd=os.path.dirname(__file__))
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def _meta(model: str, **kw) -> dict:
    meta = {"model": model, "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "git_revision": git_revision()}
    meta.update(kw)
    return meta


def _fill_param_fractions(rows: list[ProfileRow]) -> None:
    total = sum(r.params for r in rows)
    for r in rows:
        r.param_fraction = r.params / total if total else 0.0


def profile_params(cfg: ModelConfig) -> ProfileReport:
    table = count_params(cfg)
    rows = [ProfileRow(s, m, n) for s, m, n in table.rows]
    _fill_param_fractions(rows)
    return ProfileReport(rows, _meta(cfg.name))


class _StageTimer:
    """Accumulates wall time per (stage, module) for one forward."""

    def __init__(self):
        self.acc: dict[tuple[str, str], float] = {}

    @contextlib.contextmanager
    def __call__(self, stage: str, module: str):
        t0 = time.perf_counter_ns()
        try:
            yield
        finally:
            key = (stage, module)
            self.acc[key] = self.acc.get(key, 0.0) + (time.perf_counter_ns() - t0) / 1e3


def _check_coverage(weights: ModelWeights, batch: PointBatch) -> None:
    cfg = weights.cfg
    if batch.n_points == 0:
        raise ProfileError("cannot profile an empty batch")
    hier = build_hierarchy(batch, cfg.n_levels)
    for i, lvl in enumerate(hier.levels[1:], start=1):
        if lvl.n <= batch.n_scenes:
            raise ProfileError(
                f"batch too small: pooling collapses stage E{i} to {lvl.n} point(s) for {batch.n_scenes} scene(s); "
                f"use more points or a finer grid")


def profile_latency(weights: ModelWeights, batch: PointBatch, reps: int = 30, warmup: int = 5,
                    threads: int | None = None) -> ProfileReport:
    """Median wall time per (stage, module) over ``reps`` eval forwards after ``warmup`` discarded ones.

    The index build is timed as row ("prep", "index") with zero parameters.
    """
    if reps < 3:
        raise ValueError(f"reps must be >= 3, got {reps}")
    if warmup < 0:
        raise ValueError("warmup must be >= 0")
    _check_coverage(weights, batch)
    cfg = weights.cfg
    samples: list[dict[tuple[str, str], float]] = []
    totals = []
    for i in range(warmup + reps):
        tm = _StageTimer()
        t0 = time.perf_counter_ns()
        forward(weights, batch, timer=tm)
        dt = (time.perf_counter_ns() - t0) / 1e3
        if i >= warmup:
            samples.append(tm.acc)
            totals.append(dt)

    param_rows = count_params(cfg).rows
    keys = [("prep", "index")] + [(s, m) for s, m, _ in param_rows]
    counts = {(s, m): n for s, m, n in param_rows}
    missing = [k for k in keys if k not in samples[0]]
    if missing:
        raise ProfileError(f"stages never executed during forward: {missing}")
    rows = [ProfileRow(s, m, counts.get((s, m), 0), float(np.median([smp[(s, m)] for smp in samples])))
            for s, m in keys]
    _fill_param_fractions(rows)
    tot = sum(r.time_us for r in rows)
    for r in rows:
        r.time_fraction = r.time_us / tot if tot else 0.0
    meta = _meta(cfg.name, points=batch.n_points, scenes=batch.n_scenes, reps=reps, warmup=warmup,
                 threads=threads, median_forward_us=float(np.median(totals)))
    return ProfileReport(rows, meta)


# ---------------------------------------------------------------- rendering

BAR_WIDTH = 40


def bar(fraction: float, width: int = BAR_WIDTH) -> str:
    return "#" * int(round(fraction * width))


def render_text(report: ProfileReport) -> str:
    timed = report.total_time_us is not None
    lines = [f"model {report.meta.get('model', '?')}"
             + (f"  points {report.meta['points']}  reps {report.meta['reps']}  warmup {report.meta['warmup']}"
                if "points" in report.meta else "")]
    head = f"{'stage':<6} {'module':<11} {'params':>12} {'param%':>7}"
    if timed:
        head += f" {'time_us':>12} {'time%':>7}"
    lines.append(head + "  bar")
    for r in report.rows:
        line = f"{r.stage:<6} {r.module:<11} {r.params:>12,d} {100 * r.param_fraction:>6.2f}%"
        frac = r.param_fraction
        if timed:
            line += f" {r.time_us:>12.1f} {100 * r.time_fraction:>6.2f}%"
            frac = r.time_fraction
        lines.append(f"{line}  {bar(frac)}")
    total = f"{'total':<18} {report.total_params:>12,d}"
    if timed:
        total += f" {'':>7} {report.total_time_us:>12.1f}"
    lines.append(total)
    return "\n".join(lines) + "\n"


def render_csv(report: ProfileReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("schema_version",) + ROW_FIELDS)
    for r in report.rows:
        w.writerow((SCHEMA_VERSION,) + tuple("" if v is None else v for v in asdict(r).values()))
    return buf.getvalue()


def render_json(report: ProfileReport) -> str:
    return json.dumps(report.to_dict(), indent=2) + "\n"


def validate_report_dict(d: dict) -> None:
    """Structural check of a json report; raises ValueError on the first problem."""
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unknown schema_version {d.get('schema_version')!r}")
    for key in ("meta", "rows", "total_params", "total_time_us"):
        if key not in d:
            raise ValueError(f"missing key {key!r}")
    for i, row in enumerate(d["rows"]):
        if tuple(row) != ROW_FIELDS:
            raise ValueError(f"row {i} has fields {tuple(row)}")
        if not isinstance(row["params"], int) or row["params"] < 0:
            raise ValueError(f"row {i}: bad params {row['params']!r}")
    if sum(r["params"] for r in d["rows"]) != d["total_params"]:
        raise ValueError("row params do not sum to total_params")
    for key in ("model", "timestamp", "git_revision"):
        if key not in d["meta"]:
            raise ValueError(f"meta lacks {key!r}")


RENDERERS = {"text": render_text, "json": render_json, "csv": render_csv}


def emit_report(report: ProfileReport, fmt: str = "text", path=None) -> str:
    if fmt not in RENDERERS:
        raise ValueError(f"unknown format {fmt!r}; choose from {sorted(RENDERERS)}")
    out = RENDERERS[fmt](report)
    if path is None or str(path) == "-":
        sys.stdout.write(out)
    else:
        with open(path, "w") as fh:
            fh.write(out)
    return out
