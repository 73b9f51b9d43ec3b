"""Time the numba kernels against their numpy counterparts.

    python benchmarks/bench_kernels.py [--repeat N] [--epoch]

``--epoch`` also times one training epoch of the default dll run in a
subprocess with and without DECOUPLED_LABELS_DISABLE_NUMBA.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from decoupled_labels import _kernels as K


def cases(rng):
    x = rng.normal(size=(64, 30))
    y = rng.normal(size=(64, 30))
    mask = rng.integers(30, size=64)
    kl, p, q, lr = K.masked_kl_forward_np(x, y, mask)
    g = rng.normal(size=64)
    scores = rng.random((4000, 30))
    truth = rng.random((4000, 30)) < 0.05
    return [
        ("masked_kl_forward [64x30]", K.masked_kl_forward_np, getattr(K, "masked_kl_forward_nb", None), (x, y, mask)),
        ("masked_kl_backward [64x30]", K.masked_kl_backward_np, getattr(K, "masked_kl_backward_nb", None),
         (g, p, q, lr, kl, mask)),
        ("class_ranks [4000x30]", K.class_ranks_np, getattr(K, "class_ranks_nb", None), (scores,)),
        ("column_average_precision [4000x30]", K.column_average_precision_np,
         getattr(K, "column_average_precision_nb", None), (scores, truth)),
    ]


def as_tuple(out):
    return out if isinstance(out, tuple) else (out,)


def best_of(fn, args, repeat):
    number = max(1, int(0.05 / max(timeit.timeit(lambda: fn(*args), number=1), 1e-7)))
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number


EPOCH_SNIPPET = """
import time
from decoupled_labels import trainer
from decoupled_labels.config import ExperimentConfig
cfg = ExperimentConfig(mode="dll", epochs=1)
data = trainer.load_data(cfg)
trainer.train(cfg.replace(n_train=256), data=(data[0][:256], [], data[2]))  # warm-up / JIT
t = time.perf_counter()
trainer.train(cfg, data=(data[0], [], data[2]))
print(time.perf_counter() - t)
"""


def epoch_seconds(disable):
    env = dict(os.environ)
    env.pop("DECOUPLED_LABELS_DISABLE_NUMBA", None)
    if disable:
        env["DECOUPLED_LABELS_DISABLE_NUMBA"] = "1"
    out = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--epoch", action="store_true")
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        print("numba unavailable or disabled; only the numpy path is timed")
    print(f"{'kernel':38s} {'numpy':>12s} {'numba':>12s} {'speedup':>8s}")
    for name, f_np, f_nb, fargs in cases(np.random.default_rng(0)):
        t_np = best_of(f_np, fargs, args.repeat)
        if f_nb is None:
            print(f"{name:38s} {t_np * 1e6:10.1f}us {'-':>12s} {'-':>8s}")
            continue
        for a, b in zip(as_tuple(f_np(*fargs)), as_tuple(f_nb(*fargs))):
            np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)  # also triggers compilation
        t_nb = best_of(f_nb, fargs, args.repeat)
        print(f"{name:38s} {t_np * 1e6:10.1f}us {t_nb * 1e6:10.1f}us {t_np / t_nb:7.1f}x")
    if args.epoch:
        t_nb, t_np = epoch_seconds(False), epoch_seconds(True)
        print(f"{'one dll epoch (20000 samples)':38s} {t_np:11.2f}s {t_nb:11.2f}s {t_np / t_nb:7.2f}x")


if __name__ == "__main__":
    main()
