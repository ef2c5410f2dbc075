"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--frames N] [--repeat R]

Inputs mimic one hour of annotated song at the default hop (about 2.5M frames).
"""

import argparse
import time

import numpy as np

from songssl import _kernels


def make_inputs(n_frames, rng, hop_s=64 / 44100):
    n_syll = n_frames // 100
    gaps = rng.uniform(0.01, 0.05, n_syll)
    durs = rng.uniform(0.03, 0.2, n_syll)
    onsets = np.cumsum(gaps + np.r_[0, durs[:-1]])
    offsets = onsets + durs
    keep = offsets < n_frames * hop_s
    labels = rng.integers(1, 9, n_syll)
    frames = _kernels.numpy_impl["interval_labels"](onsets[keep], offsets[keep], labels[keep], n_frames, hop_s, 0)
    pred = np.where(rng.random(n_frames) < 0.1, rng.integers(0, 9, n_frames), frames)
    valid = np.ones(n_frames, dtype=bool)
    return {
        "interval_labels": (onsets[keep], offsets[keep], labels[keep].astype(np.int64), n_frames, hop_s, 0),
        "run_lengths": (pred.astype(np.int64),),
        "confusion": (frames.astype(np.int64), pred.astype(np.int64), valid, 9),
    }


def best_of(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--frames", type=int, default=2_480_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    inputs = make_inputs(args.frames, np.random.default_rng(0))
    if not _kernels.NUMBA_AVAILABLE:
        print("numba unavailable (or SONGSSL_DISABLE_NUMBA set); timing numpy only")
    print(f"{'kernel':<16} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, call_args in inputs.items():
        t_np = best_of(_kernels.numpy_impl[name], call_args, args.repeat)
        if _kernels.NUMBA_AVAILABLE:
            nb = _kernels.numba_impl[name]
            a, b = nb(*call_args), _kernels.numpy_impl[name](*call_args)
            same = all(np.array_equal(x, y) for x, y in zip(a, b)) if isinstance(a, tuple) else np.array_equal(a, b)
            assert same, f"{name}: backends disagree"
            t_nb = best_of(nb, call_args, args.repeat)
            print(f"{name:<16} {t_np * 1e3:10.2f} {t_nb * 1e3:10.2f} {t_np / t_nb:8.1f}x")
        else:
            print(f"{name:<16} {t_np * 1e3:10.2f} {'-':>10} {'-':>8}")


if __name__ == "__main__":
    main()
