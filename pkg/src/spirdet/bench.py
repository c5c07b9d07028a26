"""Sparse-vs-dense timing of the decoder's slow branch."""
import csv
import io
import time
from dataclasses import astuple, dataclass, fields
from typing import Callable, List, Sequence

import numpy as np

from .backbone import build_model, fuse_model
from .config import ModelConfig
from .dbsd import build_active_index, dense_head_macs, dense_oracle, sparse_head, sparse_head_macs, sparse_sample

DEFAULT_ALPHAS = (0.0005, 0.001, 0.005, 0.01, 0.05, 1.0)


@dataclass(frozen=True)
class BenchRecord:
    alpha: float
    mode: str
    resolution: str
    median_ms: float
    p10_ms: float
    p90_ms: float
    active_sites: int
    macs: int


CSV_HEADER = tuple(f.name for f in fields(BenchRecord))


def records_to_csv(records: Sequence[BenchRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerow([f"{v:.6g}" if isinstance(v, float) else v for v in astuple(r)])
    return buf.getvalue()


def _calibrate(fn: Callable, target_s: float) -> int:
    """Inner repetitions so one timing sample lasts about ``target_s``."""
    n = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(n):
            fn()
        dt = time.perf_counter() - t0
        if dt >= target_s or n >= 1 << 16:
            return n
        n = max(n * 2, int(n * target_s / max(dt, 1e-9)) + 1)


@dataclass
class HeadBench:
    """Inputs and parameters for one head benchmark, fixed across modes."""
    config: ModelConfig
    p_fine: np.ndarray
    v: np.ndarray
    params: object

    @classmethod
    def random(cls, config: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        model = fuse_model(build_model(config, seed))
        hf, wf = config.fine_shape
        hc, wc = config.coarse_shape
        c = config.channels_per_stage[config.fine_level]
        p_fine = rng.random((1, c, hf, wf)).astype(np.float32)
        v = rng.random((1, 1, hc, wc)).astype(np.float32)
        return cls(config, p_fine, v, model.sparse_head)

    def index(self, alpha):
        return build_active_index(sparse_sample(self.v, alpha), self.config.coarse_ratio // self.config.fine_ratio)

    def sparse_fn(self, alpha):
        def run():
            sparse_head(self.p_fine, self.index(alpha), self.params)
        return run

    def dense_fn(self, alpha):
        idx = self.index(alpha)
        return lambda: dense_oracle(self.p_fine, idx, self.params)


def bench_run(config: ModelConfig, alphas: Sequence[float] = DEFAULT_ALPHAS, repeats: int = 15, seed: int = 0,
              warmup: int = 2, sample_s: float = 0.02, modes: Sequence[str] = ("sparse", "dense")) -> List[BenchRecord]:
    """Time the sparse head (TOP-K, index build and sparse convs) against the
    masked dense execution of the same layers.

    Every timing sample repeats the call enough times to last ``sample_s``;
    samples of all (alpha, mode) pairs are interleaved round-robin so slow
    drift in machine load affects every configuration alike.
    """
    if repeats < 5:
        raise ValueError("repeats must be >= 5")
    hb = HeadBench.random(config, seed)
    res = f"{config.input_size[0]}x{config.input_size[1]}"
    jobs = []
    for a in alphas:
        idx = hb.index(a)
        for mode in modes:
            fn = hb.sparse_fn(a) if mode == "sparse" else hb.dense_fn(a)
            for _ in range(warmup):
                fn()
            if mode == "sparse":
                sites, macs = len(idx), sparse_head_macs(idx, hb.params)
            else:
                sites, macs = int(np.prod(idx.shape)), dense_head_macs(idx.shape, hb.params)
            jobs.append((a, mode, fn, _calibrate(fn, sample_s), sites, macs))
    samples = [[] for _ in jobs]
    for _ in range(repeats):
        for j, (_, _, fn, n, _, _) in enumerate(jobs):
            t0 = time.perf_counter()
            for _ in range(n):
                fn()
            samples[j].append((time.perf_counter() - t0) / n * 1e3)
    out = []
    for (a, mode, _, _, sites, macs), s in zip(jobs, samples):
        p10, med, p90 = np.percentile(s, [10, 50, 90])
        out.append(BenchRecord(float(a), mode, res, float(med), float(p10), float(p90), int(sites), int(macs)))
    return out
