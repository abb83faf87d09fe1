"""Decode throughput: adapter-only inference against datastore-interpolated inference."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .decoding import translate
from .validation import InputError

ADAPTER, KNN = "adapter", "knn"
DEFAULT_BATCH_SIZES = (8, 32, 128)


@dataclass(frozen=True)
class BenchResult:
    system: str
    batch_size: int
    sents_per_sec: float
    repetitions: int
    threads: int
    seconds: tuple = ()
    output_tokens: int = 0

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def throughput_bench(model, sources, datastore, batch_sizes=DEFAULT_BATCH_SIZES, repetitions=3, strategy=None,
                     knn_k=8, lam=0.5, kernel=None, threads=1, max_len=None):
    """Sentences per second for each (system, batch size), averaged over repetitions.

    Both systems decode the same sources with the same model and search
    settings; the kNN system queries ``datastore`` at every decoding step.
    Repetitions alternate between systems so drift affects both alike.
    """
    if not sources:
        raise InputError("benchmark needs at least one source sentence")
    if repetitions < 3:
        raise InputError("at least 3 repetitions are required")
    if datastore is None or len(datastore) == 0:
        raise InputError("the kNN system needs a non-empty datastore")
    torch.set_num_threads(threads)
    systems = {ADAPTER: None, KNN: datastore}
    # one untimed pass per system warms caches and builds any search index
    for ds in systems.values():
        translate(model, sources[:2], strategy, max_len, datastore=ds, knn_k=knn_k, lam=lam, kernel=kernel)
    results = []
    for batch in batch_sizes:
        times = {name: [] for name in systems}
        tokens = {}
        for _ in range(repetitions):
            for name, ds in systems.items():
                t0 = time.perf_counter()
                out = translate(model, sources, strategy, max_len, batch, datastore=ds, knn_k=knn_k, lam=lam, kernel=kernel)
                times[name].append(time.perf_counter() - t0)
                tokens[name] = sum(len(o) + 1 for o in out)
        for name in systems:
            speed = float(np.mean([len(sources) / s for s in times[name]]))
            results.append(BenchResult(name, batch, speed, repetitions, threads, tuple(times[name]), tokens[name]))
    return results


def speedups(results):
    """{batch size: adapter sents/s divided by kNN sents/s}."""
    by = {(r.system, r.batch_size): r.sents_per_sec for r in results}
    return {b: by[(ADAPTER, b)] / by[(KNN, b)] for (s, b) in by if s == ADAPTER and (KNN, b) in by}


def render_bench(results):
    ratio = speedups(results)
    lines = [f"{'system':<8} {'batch':>6} {'sents/s':>10} {'reps':>5} {'threads':>8}"]
    for r in results:
        lines.append(f"{r.system:<8} {r.batch_size:>6} {r.sents_per_sec:>10.1f} {r.repetitions:>5} {r.threads:>8}")
    for b, x in sorted(ratio.items()):
        lines.append(f"speedup adapter/knn at batch {b}: {x:.2f}x")
    return "\n".join(lines)
