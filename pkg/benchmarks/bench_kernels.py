"""Time the numba and numpy kernel paths side by side.

    python benchmarks/bench_kernels.py [--repeat N] [--steps N]

Prints one row per kernel with the median time of each path and the speedup,
then the wall time of full training steps with each path (each in a fresh
interpreter, since the path is chosen at import time via LMKIT_NO_NUMBA).
"""
from __future__ import annotations

import argparse
import os
import statistics
import subprocess
import sys
import time

import numpy as np

from lmkit import kernels

STEP_SNIPPET = """
import sys, time
from lmkit.corpus import build_vocab, encode_corpus
from lmkit.model import LanguageModel, resolve_arch
from lmkit.synthetic import train_heldout_split
from lmkit.trainer import TrainConfig, Trainer
tr, _ = train_heldout_split(100_000, 1_000)
v = build_vocab(tr)
enc = encode_corpus(v, tr)
arch = dict(input=sys.argv[1])
t = Trainer(LanguageModel(resolve_arch(**arch), v.words), v, enc, None, TrainConfig(eval_every=0))
t.train_step()  # compile / warm caches
t0 = time.perf_counter()
for _ in range(int(sys.argv[2])):
    t.train_step()
print((time.perf_counter() - t0) / int(sys.argv[2]))
"""


def _median_time(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def kernel_cases(rng):
    B, H = 32, 256
    z = rng.normal(size=(B, 4 * H))
    c = rng.normal(size=(B, H))
    words, L, C, F, w = 640, 18, 16, 32, 4
    x = rng.normal(size=(words, L, C))
    wt = rng.normal(size=(w * C, F))
    b = rng.normal(size=F)
    dst = np.zeros((3000, 128))
    idx = rng.integers(0, 3000, size=640)
    src = rng.normal(size=(640, 128))

    def cases(impl):
        acts, cn, tc, m = impl.lstm_pointwise_forward(z, c)
        out, arg = impl.conv_maxpool_forward(x, wt, b, w)
        dout = rng.normal(size=out.shape)
        dm = rng.normal(size=m.shape)
        return {
            "lstm_pointwise_forward": lambda: impl.lstm_pointwise_forward(z, c),
            "lstm_pointwise_backward": lambda: impl.lstm_pointwise_backward(dm, dm, acts, c, tc),
            "conv_maxpool_forward": lambda: impl.conv_maxpool_forward(x, wt, b, w),
            "conv_maxpool_backward": lambda: impl.conv_maxpool_backward(x, wt, arg, dout, w),
            "scatter_add_rows": lambda: impl.scatter_add_rows(dst, idx, src),
        }

    return cases


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--steps", type=int, default=20)
    args = ap.parse_args(argv)
    if kernels.numba_impl is None:
        sys.exit("numba is not importable; nothing to compare")
    cases = kernel_cases(np.random.default_rng(0))
    np_cases, nb_cases = cases(kernels.numpy_impl), cases(kernels.numba_impl)
    print(f"{'kernel':<26}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name in np_cases:
        a = _median_time(np_cases[name], args.repeat) * 1e3
        b = _median_time(nb_cases[name], args.repeat) * 1e3
        print(f"{name:<26}{a:>10.3f}{b:>10.3f}{a / b:>9.2f}")

    print(f"\n{'training step':<26}{'numpy s':>10}{'numba s':>10}{'speedup':>9}")
    for inp in ("table", "charcnn"):
        t = {}
        for flag in ("1", "0"):
            env = dict(os.environ, LMKIT_NO_NUMBA=flag)
            out = subprocess.run([sys.executable, "-c", STEP_SNIPPET, inp, str(args.steps)], env=env,
                                 capture_output=True, text=True, check=True)
            t[flag] = float(out.stdout.strip().splitlines()[-1])
        print(f"{inp + ' input':<26}{t['1']:>10.4f}{t['0']:>10.4f}{t['1'] / t['0']:>9.2f}")


if __name__ == "__main__":
    main()
