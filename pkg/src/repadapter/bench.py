"""Forward-latency harness comparing plain, adapter-carrying and merged models.

Variants are timed interleaved (one forward of each per repetition, rotating
the order) so drift in machine load hits all of them alike. Warmup runs are
discarded.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .nn import Backbone
from .reparam import op_count

MIN_REPS = 30


@dataclass
class BenchResult:
    variant: str
    batch: int
    median_ms: float
    p10_ms: float
    p90_ms: float
    reps: int
    ops: int
    threads: int

    @property
    def throughput(self) -> float:
        return self.batch / (self.median_ms / 1e3)

    def to_dict(self) -> dict:
        return {**asdict(self), "throughput": self.throughput}


def bench(models: dict[str, Backbone], batches=(1, 4, 16), reps: int = MIN_REPS, warmup: int = 5,
          seed: int = 0, threads: int = 1, dtype=None) -> list[BenchResult]:
    if reps < MIN_REPS:
        raise ValueError(f"reps must be >= {MIN_REPS}")
    names = list(models)
    rng = np.random.default_rng(seed)
    results = []
    with threadpool_limits(threads), T.fast_path():
        for batch in batches:
            ref = next(iter(models.values()))
            x = rng.standard_normal((batch,) + ref.input_shape()).astype(dtype or ref.dtype)
            ops = {n: op_count(m, x[:1]) for n, m in models.items()}
            for _ in range(warmup):
                for m in models.values():
                    m.forward(x)
            times: dict[str, list[float]] = {n: [] for n in names}
            for r in range(reps):
                for j in range(len(names)):
                    name = names[(r + j) % len(names)]
                    t0 = time.perf_counter()
                    models[name].forward(x)
                    times[name].append(time.perf_counter() - t0)
            for name in names:
                ms = np.array(times[name]) * 1e3
                results.append(BenchResult(name, batch, float(np.median(ms)), float(np.percentile(ms, 10)),
                                           float(np.percentile(ms, 90)), reps, ops[name], threads))
    return results


def format_table(results: list[BenchResult]) -> str:
    header = f"{'variant':<12}{'batch':>6}{'median ms':>12}{'p10 ms':>10}{'p90 ms':>10}{'img/s':>10}{'ops':>7}"
    rows = [header, "-" * len(header)]
    for r in results:
        rows.append(f"{r.variant:<12}{r.batch:>6}{r.median_ms:>12.3f}{r.p10_ms:>10.3f}{r.p90_ms:>10.3f}"
                    f"{r.throughput:>10.1f}{r.ops:>7}")
    return "\n".join(rows) + "\n"
