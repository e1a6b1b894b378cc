"""Compare the compiled and pure-Python engines on the default benchmark.

Run as `python -m phasegate.benchmark [--frames N] [--repeats R]`.
Reports wall time per backend and checks the outputs agree.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from . import backend as _backend
from .config import RunConfig
from .pipeline import run_sequence
from .prototypes import PrototypeBankSet
from .synthetic import WorkflowSpec, generate
from .training import init_params


def _time_backend(name, params, seqs, banks, repeats):
    best = float("inf")
    frames = sum(len(s) for s in seqs)
    result = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        for seq in seqs:
            result, _, _ = run_sequence(params, seq.features, banks=banks, backend=name)
        best = min(best, time.perf_counter() - t0)
    return best, frames, result


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--frames", type=int, default=4000, help="approx total frames")
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args(argv)

    cfg = RunConfig()
    spec = WorkflowSpec.from_config(cfg)
    seqs = []
    total = 0
    i = 0
    pool = generate(spec, 64, cfg.seed)
    while total < args.frames and i < len(pool):
        seqs.append(pool[i])
        total += len(pool[i])
        i += 1
    params = init_params(cfg)

    # populate prototype banks so retrieval does real work
    banks = PrototypeBankSet(cfg.num_phases, cfg.prototype_capacity, cfg.feature_dim)
    step = 0
    for seq in seqs[:3]:
        _, _, step = run_sequence(
            params, seq.features, banks=banks, labels=seq.labels,
            insert_enabled=True, insert_step=step, backend="python",
        )

    py_t, frames, py_res = _time_backend("python", params, seqs, banks, args.repeats)
    print(f"python   backend: {frames} frames in {py_t:.3f}s ({1e6 * py_t / frames:.1f} us/frame)")
    if not _backend.compiled_available():
        print("compiled backend: not built")
        return 0
    c_t, _, c_res = _time_backend("compiled", params, seqs, banks, args.repeats)
    print(f"compiled backend: {frames} frames in {c_t:.3f}s ({1e6 * c_t / frames:.1f} us/frame)")
    print(f"speedup: {py_t / c_t:.1f}x")
    diff = float(np.abs(py_res.final_dist - c_res.final_dist).max())
    agree = np.array_equal(py_res.pred_final, c_res.pred_final)
    print(f"last-sequence max |delta| = {diff:.2e}, argmax agreement: {agree}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
