"""Compare the numba and numpy kernel backends.

Run with ``python3 benchmarks/bench_kernels.py``. Prints per-kernel timings
for a few row shapes, then the wall time of one training step on a small
VRNMT model under each backend. Results are printed as a plain table.
"""

from __future__ import annotations

import argparse
import time
import timeit

import numpy as np

from vrnmt import _kernels as K
from vrnmt.config import TrainConfig, rng_streams
from vrnmt.models import ModelParams
from vrnmt.training import RMSPropState, make_batches, train_step

SHAPES = [(80, 30), (80, 2000), (800, 64)]


def _kernel_cases(rows, cols, rng):
    x = rng.normal(size=(rows, cols))
    mask = (rng.random((rows, cols)) < 0.8).astype(float)
    mask[:, 0] = 1.0
    y = K.numpy_backend.softmax(x)
    ly = K.numpy_backend.log_softmax(x)
    g = rng.normal(size=(rows, cols))
    return {
        "softmax": (x,),
        "masked_softmax": (x, mask),
        "softmax_backward": (y, g),
        "log_softmax": (x,),
        "log_softmax_backward": (ly, g),
        "sigmoid": (x,),
    }


def _best_of(fn, repeat):
    number = max(1, int(0.05 / max(timeit.timeit(fn, number=1), 1e-7)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def bench_kernels(repeat: int) -> None:
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'shape':>12}{'numpy us':>12}{'numba us':>12}{'speedup':>9}")
    for rows, cols in SHAPES:
        for name, args in _kernel_cases(rows, cols, rng).items():
            f_np = getattr(K.numpy_backend, name)
            f_nb = getattr(K.numba_backend, name)
            np.testing.assert_allclose(f_nb(*args), f_np(*args), rtol=1e-12, atol=1e-14)
            t_np = _best_of(lambda: f_np(*args), repeat)
            t_nb = _best_of(lambda: f_nb(*args), repeat)
            print(f"{name:<22}{f'{rows}x{cols}':>12}{t_np * 1e6:12.1f}{t_nb * 1e6:12.1f}"
                  f"{t_np / t_nb:9.2f}")


def bench_train_step(steps: int) -> None:
    from vrnmt.data import build_vocab, generate_toy_corpus
    from vrnmt.training import encode_corpus

    corpus = generate_toy_corpus("lexmap_swap", 320, 50, (3, 12), 0.3, seed=0)
    sv, tv = build_vocab(corpus.source, 100), build_vocab(corpus.target, 100)
    pairs = encode_corpus(corpus, sv, tv)
    cfg = TrainConfig(variant="vrnmt", batch_size=32, learning_rate=1e-3)
    for backend in ("numpy", "numba"):
        K.use_backend(backend)
        params = ModelParams.initialize("vrnmt", cfg.dims(len(sv), len(tv)), rng_streams(0)["init"])
        streams = rng_streams(0)
        state = RMSPropState()
        batches = make_batches(pairs, cfg, 0)
        train_step(params, batches[0], cfg, state, streams)  # warm-up / jit compile
        t0 = time.perf_counter()
        for k in range(steps):
            train_step(params, batches[k % len(batches)], cfg, state, streams)
        dt = (time.perf_counter() - t0) / steps
        print(f"train step ({backend:<5}) batch 32: {dt * 1e3:8.1f} ms")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--steps", type=int, default=10)
    args = ap.parse_args()
    if K.numba_backend is None:
        raise SystemExit("numba is not installed; nothing to compare")
    bench_kernels(args.repeat)
    print()
    bench_train_step(args.steps)


if __name__ == "__main__":
    main()
