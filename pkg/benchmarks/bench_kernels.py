"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 20] [--no-step]

The per-kernel rows call both implementations in one process. The last rows
time one full training iteration of the 64x64 model in a fresh interpreter
per backend, selected through FCNRLSTM_BACKEND.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from fcnrlstm import _kernels as K

STEP = """
import time, numpy as np
from fcnrlstm.autodiff import Tape, zero_grads
from fcnrlstm.fcn import FCNConfig
from fcnrlstm.model import CountingModel, ModelConfig
from fcnrlstm.training import batch_loss
m = CountingModel(ModelConfig(variant="FCN-rLSTM", fcn=FCNConfig(base_channels=4), lstm_input_downsample=8))
r = np.random.default_rng(0)
f = r.uniform(size=(8, 5, 1, 64, 64)).astype(np.float32)
d = r.uniform(size=f.shape).astype(np.float32) * 1e-3
c = r.integers(0, 9, (8, 5)).astype(float)
def step():
    zero_grads(m.parameters())
    tape = Tape()
    loss, _, _ = batch_loss(m, f, d, c, 0.01, tape)
    tape.backward(loss)
step()
t = time.perf_counter()
for _ in range({n}):
    step()
print((time.perf_counter() - t) / {n})
"""


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_cases():
    r = np.random.default_rng(0)
    x = r.standard_normal((40, 16, 32, 32)).astype(np.float32)
    ho = wo = 32
    cols = K.im2col_numpy(x, 3, 3, 1, 2, 2, ho, wo)
    pool_in = r.standard_normal((40, 8, 64, 64)).astype(np.float32)
    _, argmax = K.maxpool_forward_numpy(pool_in, 2, 2, 32, 32)
    gpool = r.standard_normal((40, 8, 32, 32)).astype(np.float32)
    canvas = np.zeros((64, 64))
    return {
        "im2col 40x16x32x32 k3 d2": (lambda: K.im2col_numpy(x, 3, 3, 1, 2, 2, ho, wo),
                                     lambda: K.im2col_numba(x, 3, 3, 1, 2, 2, ho, wo)),
        "col2im 40x16x32x32 k3 d2": (lambda: K.col2im_numpy(cols, 40, 16, 32, 32, 3, 3, 1, 2, 2, ho, wo),
                                     lambda: K.col2im_numba(cols, 40, 16, 32, 32, 3, 3, 1, 2, 2, ho, wo)),
        "maxpool fwd 40x8x64x64": (lambda: K.maxpool_forward_numpy(pool_in, 2, 2, 32, 32),
                                   lambda: K.maxpool_forward_numba(pool_in, 2, 2, 32, 32)),
        "maxpool bwd 40x8x64x64": (lambda: K.maxpool_backward_numpy(gpool, argmax, 64, 64),
                                   lambda: K.maxpool_backward_numba(gpool, argmax, 64, 64)),
        "gaussian splat sigma 3": (lambda: K.splat_gaussian_numpy(canvas, 30.5, 20.0, 3.0, 12.0),
                                   lambda: K.splat_gaussian_numba(canvas, 30.5, 20.0, 3.0, 12.0)),
    }


def train_step_seconds(backend: str, n: int) -> float:
    env = dict(os.environ, FCNRLSTM_BACKEND=backend)
    out = subprocess.run([sys.executable, "-c", STEP.format(n=n)], env=env, capture_output=True, text=True,
                         check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=5)
    ap.add_argument("--no-step", action="store_true", help="skip the full training-step timing")
    args = ap.parse_args(argv)
    if not K.NUMBA_AVAILABLE:
        sys.exit("numba is not installed; nothing to compare")

    print(f"{'case':<28} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, (np_fn, nb_fn) in kernel_cases().items():
        nb_fn()  # compile outside the timing
        a, b = best_of(np_fn, args.repeat), best_of(nb_fn, args.repeat)
        print(f"{name:<28} {a * 1e3:10.3f} {b * 1e3:10.3f} {a / b:8.2f}")
    if not args.no_step:
        a, b = train_step_seconds("numpy", args.steps), train_step_seconds("numba", args.steps)
        print(f"{'train step N=8 m=5 64x64':<28} {a * 1e3:10.1f} {b * 1e3:10.1f} {a / b:8.2f}")


if __name__ == "__main__":
    main()
