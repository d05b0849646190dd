"""Time the numba and numpy variants of each kernel on representative shapes.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Both variants are imported directly, so the HYBRIDSNN_DISABLE_NUMBA flag does
not matter here. Each row also reports whether the two outputs are bit-identical.
"""
import argparse
import time

import numpy as np

from hybridsnn import kernels
from hybridsnn.stdp import Stage2Config

F32 = np.float32


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def case_if_step(rng):
    shape = (64, 8, 64, 64)          # first IF layer of the toy backbone, batch 64
    x = rng.uniform(-1, 3, shape).astype(F32)
    v0 = np.full(shape, 1.0, F32)

    def run(step):
        v = v0.copy()
        s = np.empty_like(v)
        for _ in range(8):
            step(v, x, F32(2.0), s)
        return v, s
    return "if_step 64x8x64x64 x8", run, (kernels._if_step_numba, kernels._if_step_numpy)


def case_qcfs(rng):
    x = rng.normal(0, 2, (64, 8, 64, 64)).astype(F32)

    def run(fn):
        return fn(x, 2.0, 8, 0.5)
    return "qcfs 64x8x64x64", run, (kernels._qcfs_numba, kernels._qcfs_numpy)


def case_present(rng, learn):
    n_in, n_out, t_c = 512, 100, 300
    train = (rng.random((t_c, n_in)) < 0.2).astype(np.uint8)
    w = rng.uniform(0, 0.01, (n_in, n_out)).astype(F32)
    p = Stage2Config(n_neurons=n_out).packed()

    def run(fn):
        th = np.zeros(n_out, F32)
        dw = np.zeros_like(w) if learn else np.zeros((1, 1), F32)
        counts = np.zeros(n_out, np.int64)
        n_inh = fn(train, w, th, dw, counts, p, learn, learn)
        return th, dw, counts, np.int64(n_inh)
    label = f"present 512->100 T=300 {'learn' if learn else 'infer'}"
    return label, run, (kernels._present_numba, kernels._present_numpy)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    cases = [case_if_step(rng), case_qcfs(rng), case_present(rng, False), case_present(rng, True)]
    print(f"{'kernel':<36}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}  identical")
    for label, run, (fast, slow) in cases:
        out_fast = run(fast)              # also triggers compilation
        out_slow = run(slow)
        same = all(np.array_equal(a, b) for a, b in zip(_tuple(out_fast), _tuple(out_slow)))
        t_fast = best_of(lambda: run(fast), args.repeat)
        t_slow = best_of(lambda: run(slow), args.repeat)
        print(f"{label:<36}{t_fast * 1e3:>10.2f}{t_slow * 1e3:>10.2f}{t_slow / t_fast:>8.1f}x  {same}")


def _tuple(x):
    return x if isinstance(x, tuple) else (x,)


if __name__ == "__main__":
    main()
