"""Micro-benchmarks for irrep vs. Cartesian transforms."""
from __future__ import annotations

import csv
import io
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .group import random_rotation_matrices
from .reps import MAX_CARTESIAN_ORDER, MAX_IRREP_DEGREE, RepAction, RepKind, parse_repspec, wigner_d_stack
from .errors import UnsupportedDegree

BENCH_HEADER = ["kind", "degree", "multiplicity", "batch", "median_seconds", "reps", "components", "ops_estimate"]
WARMUP = 5
MIN_REPS = 30


@dataclass
class BenchResult:
    kind: str
    degree: int
    multiplicity: int
    batch: int
    median_seconds: float
    reps: int
    components: int
    ops_estimate: int


def time_call(fn, reps: int, warmup: int = WARMUP) -> float:
    """Median wall time of ``fn()`` over ``reps`` runs after ``warmup`` untimed runs."""
    for _ in range(warmup):
        fn()
    samples = np.empty(reps)
    for k in range(reps):
        t0 = time.perf_counter()
        fn()
        samples[k] = time.perf_counter() - t0
    return float(np.median(samples))


def _threaded(apply, x: np.ndarray, threads: int):
    if threads <= 1:
        return lambda: apply(x)
    chunks = np.array_split(np.arange(x.shape[0]), threads)
    pool = ThreadPoolExecutor(threads)

    def run():
        list(pool.map(lambda idx: apply(x[idx[0] : idx[-1] + 1]), chunks))

    return run


def bench_transforms(
    degrees=range(0, 17),
    multiplicities=(16,),
    batch: int = 2048,
    reps: int = MIN_REPS,
    cartesian_orders=range(0, 5),
    wigner_batch: int = 64,
    threads: int = 1,
    seed: int = 0,
) -> list[BenchResult]:
    """Time Wigner construction, cached irrep application and Cartesian application.

    Each timed transform acts on ``batch`` group elements with ``multiplicity``
    feature copies per element. Wigner construction runs the full recurrence up
    to degree ``l`` for ``wigner_batch`` rotations.
    """
    degrees, orders = list(degrees), list(cartesian_orders)
    if any(l < 0 or l > MAX_IRREP_DEGREE for l in degrees):
        raise UnsupportedDegree(f"irrep degrees must lie in [0, {MAX_IRREP_DEGREE}]")
    if any(n < 0 or n > MAX_CARTESIAN_ORDER for n in orders):
        raise UnsupportedDegree(f"cartesian orders must lie in [0, {MAX_CARTESIAN_ORDER}]")
    reps = max(int(reps), MIN_REPS)
    rng = np.random.default_rng(seed)
    rots = random_rotation_matrices(rng, batch)
    wrots = rots[:wigner_batch]
    out = []
    for l in degrees:
        t = time_call(lambda: wigner_d_stack(l, wrots), reps)
        ops = wigner_batch * sum((2 * k + 1) ** 2 for k in range(1, l + 1)) * 9
        out.append(BenchResult("wigner", l, 1, wigner_batch, t, reps, 2 * l + 1, ops))
    for mult in multiplicities:
        for l in degrees:
            act = RepAction(parse_repspec(f"{mult}x{l}n", RepKind.IRREP), rots, np.ones(batch))
            x = rng.standard_normal((batch, mult * (2 * l + 1)))
            t = time_call(_threaded(act.apply, x, threads), reps)
            out.append(BenchResult("irrep", l, mult, batch, t, reps, 2 * l + 1, batch * mult * (2 * l + 1) ** 2))
        for n in orders:
            act = RepAction(parse_repspec(f"{mult}x{n}n", RepKind.CARTESIAN), rots, np.ones(batch))
            x = rng.standard_normal((batch, mult * 3**n))
            t = time_call(_threaded(act.apply, x, threads), reps)
            out.append(BenchResult("cartesian", n, mult, batch, t, reps, 3**n, batch * mult * n * 3 ** (n + 1)))
    return out


def to_csv(results: list[BenchResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_HEADER)
    for r in results:
        w.writerow([r.kind, r.degree, r.multiplicity, r.batch, repr(r.median_seconds), r.reps, r.components, r.ops_estimate])
    return buf.getvalue()


def read_csv(text: str) -> list[BenchResult]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [
        BenchResult(r["kind"], int(r["degree"]), int(r["multiplicity"]), int(r["batch"]), float(r["median_seconds"]), int(r["reps"]), int(r["components"]), int(r["ops_estimate"]))
        for r in rows
    ]


def wigner_exponent(results: list[BenchResult], lo: int = 4, hi: int = 16) -> float:
    """Slope of log(time) against log(l) for Wigner construction."""
    pts = sorted((r.degree, r.median_seconds) for r in results if r.kind == "wigner" and lo <= r.degree <= hi)
    if len(pts) < 2:
        raise ValueError("need at least two Wigner rows in range")
    l, t = np.array(pts).T
    return float(np.polyfit(np.log(l), np.log(t), 1)[0])


def cartesian_ratios(results: list[BenchResult], multiplicity: int | None = None) -> dict[int, float]:
    """``time(n+1) / time(n)`` for consecutive Cartesian orders, keyed by ``n``."""
    rows = [r for r in results if r.kind == "cartesian" and (multiplicity is None or r.multiplicity == multiplicity)]
    if multiplicity is None and rows:
        rows = [r for r in rows if r.multiplicity == rows[0].multiplicity]
    times = {r.degree: r.median_seconds for r in rows}
    return {n: times[n + 1] / times[n] for n in sorted(times) if n + 1 in times}


def diagnostics(results: list[BenchResult]) -> dict:
    ratios = cartesian_ratios(results)
    exp = wigner_exponent(results) if sum(r.kind == "wigner" and 4 <= r.degree <= 16 for r in results) >= 2 else float("nan")
    return {
        "wigner_exponent": exp,
        "wigner_exponent_ok": bool(2.0 <= exp <= 4.0),
        "cartesian_ratios": ratios,
        "cartesian_ratios_ok": bool(all(ratios.get(n, 0.0) >= 2.0 for n in (1, 2, 3) if n in ratios) and ratios),
        "components_ok": all(r.components == (3**r.degree if r.kind == "cartesian" else 2 * r.degree + 1) for r in results),
    }
