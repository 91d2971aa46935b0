"""Timing of the three SSD evaluation paths across sequence lengths."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .ssd import DEFAULT_CHUNK, ssd_chunked_scan, ssd_dual_quadratic, ssd_recurrence

PATHS = ("recurrence", "quadratic", "chunked")
DEFAULT_LENGTHS = (256, 512, 1024, 2048, 4096, 8192)


class AgreementError(AssertionError):
    pass


@dataclass
class BenchResult:
    lengths: list
    seconds: dict  # path -> list of best-of-repeats wall times
    max_deviation: list
    exponents: dict  # path -> fitted log-log slope (NaN with < 2 lengths)

    def table(self) -> str:
        lines = [f"{'L':>6}  " + "  ".join(f"{p + ' ns/tok':>18}" for p in PATHS) + f"  {'max |dev|':>10}"]
        for i, L in enumerate(self.lengths):
            cells = "  ".join(f"{self.seconds[p][i] / L * 1e9:>18.1f}" for p in PATHS)
            lines.append(f"{L:>6}  {cells}  {self.max_deviation[i]:>10.2e}")
        lines.append("scaling exponent: " + ", ".join(
            f"{p}={self.exponents[p]:.3f}" for p in PATHS))
        return "\n".join(lines)


def bench_inputs(L, heads=1, head_dim=16, state_dim=16, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, size=(heads, L, head_dim))
    A = rng.uniform(0.8, 1.0, size=(heads, L))
    B = rng.uniform(-1, 1, size=(1, L, state_dim))
    C = rng.uniform(-1, 1, size=(1, L, state_dim))
    return x, A, B, C


def _best_time(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def fit_exponent(lengths, seconds) -> float:
    if len(lengths) < 2:
        return float("nan")
    return float(np.polyfit(np.log(lengths), np.log(seconds), 1)[0])


def run_bench(lengths=DEFAULT_LENGTHS, chunk=DEFAULT_CHUNK, repeats=3, tol=1e-8, seed=0,
              **dims) -> BenchResult:
    """Check agreement at every length, then time each path.

    Raises :class:`AgreementError` before any timing if the paths disagree.
    """
    lengths = [int(L) for L in lengths]
    deviations = []
    for L in lengths:
        x, A, B, C = bench_inputs(L, seed=seed, **dims)
        ref = ssd_recurrence(x, A, B, C)
        dev = max(np.max(np.abs(ssd_dual_quadratic(x, A, B, C) - ref)),
                  np.max(np.abs(ssd_chunked_scan(x, A, B, C, chunk) - ref)))
        if not dev < tol:
            raise AgreementError(f"paths disagree at L={L}: max deviation {dev:.3e} >= {tol:g}")
        deviations.append(float(dev))
    seconds = {p: [] for p in PATHS}
    for L in lengths:
        x, A, B, C = bench_inputs(L, seed=seed, **dims)
        seconds["recurrence"].append(_best_time(lambda: ssd_recurrence(x, A, B, C), repeats))
        seconds["quadratic"].append(_best_time(lambda: ssd_dual_quadratic(x, A, B, C), repeats))
        seconds["chunked"].append(_best_time(lambda: ssd_chunked_scan(x, A, B, C, chunk), repeats))
    exps = {p: fit_exponent(lengths, seconds[p]) for p in PATHS}
    return BenchResult(lengths, seconds, deviations, exps)
