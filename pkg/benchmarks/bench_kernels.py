#!/usr/bin/env python3
"""Benchmark the numba-accelerated kernels against their numpy fallbacks.

The package selects the implementation at import time: numba when
available, pure numpy when it is missing or STYLESEARCH_DISABLE_NUMBA=1.
This script times both implementations directly on the two hot kernels
(overlap-add synthesis assembly, index similarity scan) plus the
end-to-end paths that call them.

Usage: python benchmarks/bench_kernels.py [--rows 100000] [--frames 2000]
"""

import argparse
import time

import numpy as np

from stylesearch import _accel


def timeit(fn, repeats=7):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_overlap_add(n_frames):
    rng = np.random.default_rng(0)
    frames = rng.standard_normal((n_frames, 512))
    hop = 160
    out_len = (n_frames - 1) * hop + 512

    def run_numpy():
        _accel._ola_numpy(frames, hop, np.zeros(out_len))

    rows = [("overlap_add/numpy", timeit(run_numpy))]
    if _accel.HAS_NUMBA:
        _accel._ola_numba(frames, hop, np.zeros(out_len))  # compile

        def run_numba():
            _accel._ola_numba(frames, hop, np.zeros(out_len))

        rows.append(("overlap_add/numba", timeit(run_numba)))
        a = _accel._ola_numpy(frames, hop, np.zeros(out_len))
        b = _accel._ola_numba(frames, hop, np.zeros(out_len))
        assert np.allclose(a, b, atol=1e-12), "implementations disagree"
    return rows


def bench_scan(n_rows, d=64):
    rng = np.random.default_rng(1)
    mat = rng.standard_normal((n_rows, d))
    mat /= np.linalg.norm(mat, axis=1, keepdims=True)
    q = rng.standard_normal(d)
    q /= np.linalg.norm(q)

    def run_numpy():
        _accel._scan_numpy(mat, q, np.empty(n_rows))

    rows = [("scan_scores/numpy", timeit(run_numpy))]
    if _accel.HAS_NUMBA:
        _accel._scan_numba(mat, q, np.empty(n_rows))  # compile

        def run_numba():
            _accel._scan_numba(mat, q, np.empty(n_rows))

        rows.append(("scan_scores/numba", timeit(run_numba)))
        assert np.allclose(
            _accel._scan_numpy(mat, q, np.empty(n_rows)),
            _accel._scan_numba(mat, q, np.empty(n_rows)),
            rtol=1e-10,
        ), "implementations disagree"
    return rows


def bench_synthesis():
    from stylesearch.corpus import StyleRegistry, SyntheticCorpusSpec, synth_corpus

    spec = SyntheticCorpusSpec(
        styles=StyleRegistry(("calm", "excited")),
        utterances_per_style=10,
        duration_range_s=(1.0, 4.0),
        seed=0,
    )
    return [("synth_corpus(2x10)", timeit(lambda: synth_corpus(spec), repeats=3))]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--rows", type=int, default=100_000, help="index rows for the scan")
    parser.add_argument("--frames", type=int, default=2000, help="synthesis frames for OLA")
    args = parser.parse_args()

    print(f"numba available: {_accel.HAS_NUMBA}; active path: "
          f"{'numba' if _accel.USE_NUMBA else 'numpy'}")
    print(f"{'kernel':<24}{'best (ms)':>12}")
    for name, seconds in (
        bench_overlap_add(args.frames) + bench_scan(args.rows) + bench_synthesis()
    ):
        print(f"{name:<24}{seconds * 1e3:>12.3f}")


if __name__ == "__main__":
    main()
