"""Benchmark cases, timing harness and result tables.

Two case families: the synthetic dense 2x2-recursive structure (all leaves
dense, diagonally dominant random entries) and the kernel-assembled cases on
the built-in geometries.  Timings cover the factorization only; correctness
is reported as the worst relative residual of random matrix-vector probes
against the pre-factorization matrix.
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .blocks import build_diagonal_2x2_tree
from .hlu import (
    PARALLEL,
    SEQUENTIAL,
    hlu_factorize,
    lower_unit_matvec,
    make_plan,
    upper_matvec,
)
from .hmatrix import LOWRANK, build_hmatrix, hmatvec
from .kernels import make_bem_case
from .lowrank import TruncationControl

RESIDUAL_PROBES = 10


@dataclass
class BenchConfig:
    """Self-validating description of one benchmark run."""

    case: str = "dense2x2"  # dense2x2 | bem
    n: int = 1024
    r: int = 4  # recursion depth of the dense2x2 structure
    d: int = 1  # kernel dimension of the bem case
    eta: float = 0.5
    leafsize: int = 512
    order: int = 0  # 0 = per-dimension default
    eps: float = 1e-6
    kmax: int | None = None
    mode: str = "seq"  # seq | par
    workers: int = 1
    wd_er: bool = True
    repetitions: int = 3
    seed: int = 0

    def validate(self):
        if self.case not in ("dense2x2", "bem"):
            raise ValueError(f"unknown case {self.case!r}")
        if self.mode not in ("seq", "par"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.n < 2:
            raise ValueError("n must be >= 2")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.case == "bem" and self.d not in (1, 2, 3):
            raise ValueError("bem dimension must be 1, 2 or 3")
        return self

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text)).validate()


@dataclass
class BenchResult:
    """Timings and quality measures of one configuration."""

    config: BenchConfig
    times: list = field(default_factory=list)
    seq_times: list = field(default_factory=list)
    flops: float = 0.0
    residual: float = float("nan")
    peak_rank: int = 0

    @property
    def min_time(self):
        return min(self.times)

    @property
    def median_time(self):
        return statistics.median(self.times)

    @property
    def gflops(self):
        return self.flops / self.min_time / 1e9

    @property
    def speedup(self):
        if not self.seq_times:
            return 1.0
        return statistics.median(self.seq_times) / self.median_time

    def row(self):
        cfg = self.config
        shape = cfg.eta if cfg.case == "bem" else cfg.r
        return {
            "case": cfg.case,
            "n": cfg.n,
            "eta_or_r": shape,
            "mode": cfg.mode,
            "workers": cfg.workers if cfg.mode == "par" else 1,
            "wd_er": cfg.wd_er if cfg.mode == "par" else "",
            "time": self.median_time,
            "gflops": self.gflops,
            "speedup": self.speedup,
            "residual": self.residual,
        }


def build_case(cfg: BenchConfig):
    """Assembled H-matrix for a configuration (freshly filled each call)."""
    if cfg.case == "dense2x2":
        root, _ = build_diagonal_2x2_tree(cfg.n, cfg.r)
        rng = np.random.default_rng(cfg.seed)

        def fill(block):
            m = rng.standard_normal((block.rows, block.cols))
            if block.row_range == block.col_range:
                m += cfg.n * np.eye(block.rows)
            return m

        return build_hmatrix(root, fill)
    case = make_bem_case(
        cfg.d, cfg.n, cfg.eta, cfg.leafsize, cfg.order, cfg.eps, cfg.kmax
    )
    return case.hmatrix


def residual_probe(original, factored, seed=0, probes=RESIDUAL_PROBES):
    """Worst relative residual ||A x - L (U x)|| / ||A x|| over random x."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    n = original.cols
    for _ in range(probes):
        x = rng.standard_normal(n)
        ax = hmatvec(original, x)
        lux = lower_unit_matvec(factored, upper_matvec(factored, x))
        worst = max(worst, float(np.linalg.norm(ax - lux) / np.linalg.norm(ax)))
    return worst


def _plan_for(cfg: BenchConfig, h, mode):
    return make_plan(
        h,
        truncation=TruncationControl(cfg.eps, cfg.kmax),
        mode=SEQUENTIAL if mode == "seq" else PARALLEL,
        workers=cfg.workers,
        wd_er=cfg.wd_er,
        seed=cfg.seed,
    )


def _timed_runs(cfg, template, mode):
    times = []
    last = None
    flops = 0.0
    for _ in range(cfg.repetitions):
        h = template.copy()
        plan = _plan_for(cfg, h, mode)
        t0 = time.perf_counter()
        hlu_factorize(plan)
        times.append(time.perf_counter() - t0)
        flops = plan.flops.total
        last = h
    return times, last, flops


def run_bench(cfg: BenchConfig) -> BenchResult:
    """Build the case, factorize per config, probe the residual."""
    cfg.validate()
    template = build_case(cfg)
    result = BenchResult(config=cfg)
    times, factored, counted = _timed_runs(cfg, template, cfg.mode)
    result.times = times
    if cfg.mode == "par":
        result.seq_times = _timed_runs(cfg, template, "seq")[0]
    if cfg.case == "dense2x2":
        result.flops = 2.0 * cfg.n**3 / 3.0
    else:
        result.flops = counted
    result.residual = residual_probe(template, factored, cfg.seed)
    ranks = [leaf.data.k for leaf in factored.leaves() if leaf.kind == LOWRANK]
    result.peak_rank = max(ranks, default=0)
    return result


TABLE_COLUMNS = (
    "case",
    "n",
    "eta_or_r",
    "mode",
    "workers",
    "wd_er",
    "time",
    "gflops",
    "speedup",
    "residual",
)


def emit_csv(results):
    lines = [",".join(TABLE_COLUMNS)]
    for r in results:
        row = r.row()
        cells = []
        for col in TABLE_COLUMNS:
            v = row[col]
            if isinstance(v, float):
                cells.append("%.6g" % v)
            else:
                cells.append(str(v))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def emit_json(results):
    return json.dumps([r.row() for r in results], indent=2, sort_keys=True) + "\n"


def emit_text(results):
    rows = [[str(c) for c in TABLE_COLUMNS]]
    for r in results:
        row = r.row()
        rows.append(
            ["%.4g" % row[c] if isinstance(row[c], float) else str(row[c]) for c in TABLE_COLUMNS]
        )
    widths = [max(len(row[i]) for row in rows) for i in range(len(TABLE_COLUMNS))]
    out = []
    for row in rows:
        out.append("  ".join(cell.rjust(w) for cell, w in zip(row, widths)))
    return "\n".join(out) + "\n"
