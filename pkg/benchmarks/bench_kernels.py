#!/usr/bin/env python3
"""Benchmark the numba-jitted hot kernels against their pure-numpy fallbacks.

Shapes default to the desk-scale training configuration (T=248 frames,
32..48 channels, kernel width 5, K=2 slots). The jit path is warmed before
timing so compilation is excluded. Run with MSEB_NUMBA=0 to verify the
package itself falls back cleanly; this script always times both paths
directly and does not depend on the flag.
"""

import argparse
import json
import time

import numpy as np

from mseb import _kernels as k


def _time(fn, *args, repeats):
    fn(*args)  # warm-up (jit compilation, caches)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - t0) / repeats


def build_cases(t_frames, channels, dtype):
    rng = np.random.default_rng(0)
    w = 5
    xp = np.ascontiguousarray(rng.normal(size=(t_frames + w - 1, channels)).astype(dtype))
    kern = np.ascontiguousarray(rng.normal(size=(w, channels, channels)).astype(dtype))
    gout = np.ascontiguousarray(rng.normal(size=(t_frames, channels)).astype(dtype))
    flat = np.ascontiguousarray(rng.normal(size=(t_frames, 2 * 16)).astype(dtype))
    targets = np.ascontiguousarray(rng.normal(size=(2, 16)).astype(dtype))
    frames = np.ascontiguousarray(rng.normal(size=(t_frames, 2, 16)).astype(dtype))
    return [
        ("conv1d_fwd", (xp, kern, 1, 1), k.conv1d_fwd_numpy, k.conv1d_fwd_numba),
        ("conv1d_bwd_x", (gout, kern, 1, 1, xp.shape[0]), k.conv1d_bwd_x_numpy, k.conv1d_bwd_x_numba),
        ("conv1d_bwd_k", (xp, gout, 1, 1, w), k.conv1d_bwd_k_numpy, k.conv1d_bwd_k_numba),
        ("sliding_sum", (flat, 11, 1), k.sliding_sum_numpy, k.sliding_sum_numba),
        ("sliding_scatter", (flat, 11, 1, t_frames), k.sliding_scatter_numpy, k.sliding_scatter_numba),
        ("pit_cost", (targets, frames), k.pit_cost_numpy, k.pit_cost_numba),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--frames", type=int, default=248)
    ap.add_argument("--channels", type=int, default=48)
    ap.add_argument("--repeats", type=int, default=50)
    ap.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    ap.add_argument("--out", help="optional JSON output path")
    args = ap.parse_args()

    if not k.HAVE_NUMBA:
        print("numba is not importable; only the numpy path can be timed")
    rows = []
    print(f"shapes: T={args.frames} C={args.channels} dtype={args.dtype}, {args.repeats} repeats")
    print(f"{'kernel':<16}{'numpy':>12}{'numba':>12}{'speedup':>9}")
    for name, data, fn_np, fn_nb in build_cases(args.frames, args.channels, np.dtype(args.dtype)):
        t_np = _time(fn_np, *data, repeats=args.repeats)
        if fn_nb is not None:
            t_nb = _time(fn_nb, *data, repeats=args.repeats)
            np.testing.assert_allclose(fn_np(*data), fn_nb(*data), rtol=2e-4, atol=1e-5)
            ratio = t_np / t_nb
            print(f"{name:<16}{t_np*1e6:>10.1f}us{t_nb*1e6:>10.1f}us{ratio:>8.2f}x")
        else:
            t_nb = None
            ratio = None
            print(f"{name:<16}{t_np*1e6:>10.1f}us{'-':>12}{'-':>9}")
        rows.append({"kernel": name, "numpy_s": t_np, "numba_s": t_nb, "speedup": ratio})
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"frames": args.frames, "channels": args.channels, "dtype": args.dtype, "rows": rows}, fh, indent=1)
        print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
