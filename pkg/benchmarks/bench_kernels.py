"""Compiled vs pure-numpy kernel timings.

    python benchmarks/bench_kernels.py [--repeat N] [--quick]

Per-kernel rows call both backends directly on the shapes a 3D-GAP training
batch produces. The end-to-end row times one forward/backward pass of the
3D-GAP network in a subprocess per backend (ERP_FORGE_PURE selects it).
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from erp_forge import dsp, kernels

STEP = """
import time, numpy as np
from erp_forge import models, kernels
net = models.build_model(models.canonical_spec("3d", "gap", 32), 0)
x = np.random.default_rng(0).standard_normal((32, 32, 64, 5, 1)).astype(np.float32)
net.forward(x, training=True); net.backward(np.ones((32, 2), np.float32))
best = float("inf")
for _ in range({repeat}):
    t = time.perf_counter()
    net.forward(x, training=True); net.backward(np.ones((32, 2), np.float32))
    best = min(best, time.perf_counter() - t)
print(kernels.BACKEND, best)
"""


def cases(quick):
    rng = np.random.default_rng(0)
    n = 8 if quick else 32
    sos = dsp.design_butterworth_bandpass(0.1, 30.0, 4, 512.0).sos
    sig = rng.standard_normal((32, 512 * (20 if quick else 120)))
    xp = rng.standard_normal((n, 32, 70, 7, 1)).astype(np.float32)
    dcols = rng.standard_normal(kernels.backend("python").im2col(xp, 1, 7, 3).shape).astype(np.float32)
    act = rng.standard_normal((n, 1, 64, 5, 64)).astype(np.float32)
    gamma = np.ones(64, np.float32)
    beta = np.zeros(64, np.float32)
    flat = act.reshape(-1, 64)
    return [
        ("sosfilt 32ch", lambda k: k.sosfilt(sos, sig)),
        ("im2col 1x7x3", lambda k: k.im2col(xp, 1, 7, 3)),
        ("col2im 1x7x3", lambda k: k.col2im(dcols, xp.shape, 1, 7, 3)),
        ("gelu+deriv", lambda k: k.gelu_with_deriv(act)),
        ("swish+deriv", lambda k: k.swish_with_deriv(act)),
        ("bn train fwd", lambda k: k.bn_forward_train(flat, gamma, beta, 1e-3)),
    ]


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def end_to_end(repeat):
    out = {}
    for pure in ("0", "1"):
        env = {**os.environ, "ERP_FORGE_PURE": pure}
        res = subprocess.run([sys.executable, "-c", STEP.format(repeat=repeat)], env=env,
                             capture_output=True, text=True, check=True)
        name, t = res.stdout.split()
        out[name] = float(t)
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true", help="smaller inputs")
    args = ap.parse_args(argv)
    if not kernels.HAVE_COMPILED:
        sys.exit("compiled kernels are not built; run `pip install --no-build-isolation -e .`")
    cc, py = kernels.backend("compiled"), kernels.backend("python")
    print(f"{'kernel':<16}{'compiled ms':>12}{'python ms':>12}{'speedup':>9}")
    for name, fn in cases(args.quick):
        tc = best_of(lambda: fn(cc), args.repeat) * 1e3
        tp = best_of(lambda: fn(py), args.repeat) * 1e3
        print(f"{name:<16}{tc:>12.2f}{tp:>12.2f}{tp / tc:>8.1f}x")
    e2e = end_to_end(max(1, args.repeat // 2))
    tc, tp = e2e["compiled"] * 1e3, e2e["python"] * 1e3
    print(f"{'3d-gap step':<16}{tc:>12.1f}{tp:>12.1f}{tp / tc:>8.1f}x")


if __name__ == "__main__":
    main()
