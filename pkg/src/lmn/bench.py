"""Per-query scoring cost benchmark: naive full-key scoring versus the
decomposed two-axis scoring, measured on each available kernel backend.

Counted multiply-adds come from the kernels' own accounting: the
decomposed path does 2 * sqrt(n) * d per query, the naive path
n * 2d = 2 * n * d, so growing sqrt(n) by 10x grows the decomposed count
by exactly 10x and the naive count by 100x.  Wall time is the median
over repetitions of a timed loop of queries; building the materialised
full key table is setup, not serving cost, and stays outside the timer.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import _kernels as kernels
from .counters import score_madds
from .dataset import rng_stream
from .errors import ContractError

CSV_HEADER = "sqrt_n,d,method,backend,madds_per_query,wall_us_per_query,queries,reps"


@dataclass
class BenchRow:
    sqrt_n: int
    d: int
    method: str    # "decomposed" | "naive"
    backend: str   # kernel backend name
    madds_per_query: int
    wall_us_per_query: float
    queries: int
    reps: int

    def csv_row(self) -> str:
        return (f"{self.sqrt_n},{self.d},{self.method},{self.backend},"
                f"{self.madds_per_query},{self.wall_us_per_query:.4f},"
                f"{self.queries},{self.reps}")


def _materialise_full_keys(row_keys: np.ndarray, col_keys: np.ndarray) -> np.ndarray:
    m, d = row_keys.shape
    full = np.empty((m * m, 2 * d), dtype=row_keys.dtype)
    full[:, :d] = np.repeat(row_keys, m, axis=0)
    full[:, d:] = np.tile(col_keys, (m, 1))
    return full


def run_scaling_bench(sqrt_ns: list[int], d: int, reps: int = 5,
                      queries: int = 32, seed: int = 0,
                      backends: list[str] | None = None,
                      float32: bool = False) -> list[BenchRow]:
    """Count and time per-query scoring for each sqrt(n) and method.

    With ``float32`` the timed arrays are 32-bit and only the NumPy
    backend runs (the compiled kernels are float64-only); counted
    multiply-adds are unaffected by dtype.
    """
    if reps < 1 or queries < 1:
        raise ContractError("reps and queries must be positive")
    if backends is None:
        backends = ["python"] if float32 else list(kernels.available_backends())
    dtype = np.float32 if float32 else np.float64
    rows: list[BenchRow] = []
    for sqrt_n in sqrt_ns:
        rng = rng_stream(seed, f"bench.{sqrt_n}.{d}")
        row_keys = rng.standard_normal((sqrt_n, d)).astype(dtype)
        col_keys = rng.standard_normal((sqrt_n, d)).astype(dtype)
        q_rows = rng.standard_normal((queries, d)).astype(dtype)
        q_cols = rng.standard_normal((queries, d)).astype(dtype)
        full_keys = _materialise_full_keys(row_keys, col_keys)
        q_full = np.concatenate([q_rows, q_cols], axis=1)
        for backend in backends:
            if float32 and backend != "python":
                continue
            impl = kernels.get_impl(backend)

            def decomposed_pass():
                for qi in range(queries):
                    impl.score_vec(row_keys, q_rows[qi])
                    impl.score_vec(col_keys, q_cols[qi])

            def naive_pass():
                for qi in range(queries):
                    impl.score_vec(full_keys, q_full[qi])

            for method, one_pass in (("decomposed", decomposed_pass),
                                     ("naive", naive_pass)):
                score_madds.reset()
                one_pass()
                per_query = score_madds.value // queries
                times = []
                for _ in range(reps):
                    begin = time.perf_counter()
                    one_pass()
                    times.append(time.perf_counter() - begin)
                wall_us = float(np.median(times)) / queries * 1e6
                rows.append(BenchRow(
                    sqrt_n=sqrt_n, d=d, method=method, backend=backend,
                    madds_per_query=int(per_query),
                    wall_us_per_query=wall_us, queries=queries, reps=reps,
                ))
        del full_keys
    score_madds.reset()
    return rows


def scaling_summary(rows: list[BenchRow], low: int, high: int) -> list[str]:
    """Human-readable ratio lines comparing two sqrt(n) settings."""
    lines = []
    for backend in sorted({r.backend for r in rows}):
        for method in ("decomposed", "naive"):
            lo = [r for r in rows
                  if r.backend == backend and r.method == method and r.sqrt_n == low]
            hi = [r for r in rows
                  if r.backend == backend and r.method == method and r.sqrt_n == high]
            if not lo or not hi:
                continue
            count_ratio = hi[0].madds_per_query / lo[0].madds_per_query
            wall_ratio = hi[0].wall_us_per_query / lo[0].wall_us_per_query
            lines.append(
                f"{method:10s} [{backend:8s}] sqrt_n {low}->{high}: "
                f"counted x{count_ratio:.1f}, wall x{wall_ratio:.2f}"
            )
    return lines
