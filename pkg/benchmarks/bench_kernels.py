"""Benchmark the compiled kernels against the pure-Python reference.

Times the three hot kernels on a representative tile workload:

    python benchmarks/bench_kernels.py --side 128 --scenes 120 --tv-iters 20

The detect workload mirrors a two-year monitoring run (one SAR-cadence
modality plus a cloud-masked optical one); fit covers a defining period;
the TV solve runs a fixed iteration count on the full stack.
"""
import argparse
import time

import numpy as np

from budd._kernels import available_backends


def make_fit_inputs(rng, scenes, n):
    values = rng.normal(0.6, 0.2, (scenes, n)).astype(np.float32)
    valid = (rng.random((scenes, n)) > 0.3).astype(np.uint8)
    return np.ascontiguousarray(values), np.ascontiguousarray(valid)


def make_detect_inputs(rng, steps, n):
    dates = np.arange(17532, 17532 + 6 * steps, 6, dtype=np.int32)
    starts, rows, vals, valids = [], [], [], []
    mu_f = np.zeros((3, n))
    sigma = np.ones((3, n))
    mu_nf = np.zeros((3, n))
    modeled = np.zeros((3, n), dtype=np.uint8)
    specs = [
        # (mu, sd, shift, presence)
        (0.8, 0.05, -6.0, 0.4),   # optical, cloud-starved
        (6.0, 0.8, -6.0, 1.0),    # backscatter ratio, every step
        (0.25, 0.05, 7.0, 1.0),   # coherence, every step
    ]
    for m, (mu, sd, shift, presence) in enumerate(specs):
        t_idx = np.flatnonzero(rng.random(steps) <= presence)
        counts = np.zeros(steps + 1, dtype=np.int32)
        counts[t_idx + 1] = 1
        starts.append(np.cumsum(counts).astype(np.int32))
        rows.append(np.arange(len(t_idx), dtype=np.int32))
        v = rng.normal(mu, sd, (len(t_idx), n))
        flips = rng.random(n) < 0.02  # a couple of real events
        late = t_idx >= steps // 2
        v[np.ix_(late, flips)] = rng.normal(
            mu + shift * sd, sd, (int(late.sum()), int(flips.sum()))
        )
        vals.append(np.ascontiguousarray(v.astype(np.float32)))
        valids.append(np.ones((len(t_idx), n), dtype=np.uint8))
        mu_f[m] = mu
        sigma[m] = sd
        mu_nf[m] = mu + shift * sd
        modeled[m] = 1
    return (dates, starts, rows, vals, valids,
            np.ascontiguousarray(mu_f), np.ascontiguousarray(sigma),
            np.ascontiguousarray(mu_nf), modeled, 0.6, 0.975, 0.5, 0.5, 2)


def timed(fn, *args, repeat=3):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--side", type=int, default=128, help="tile side in pixels")
    parser.add_argument("--scenes", type=int, default=120, help="scene count")
    parser.add_argument("--tv-iters", type=int, default=20)
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    n = args.side * args.side
    backends = available_backends()
    print(f"tile {args.side}x{args.side} ({n} pixels), {args.scenes} scenes; "
          f"backends: {', '.join(backends)}")

    fit_in = make_fit_inputs(rng, args.scenes, n)
    det_in = make_detect_inputs(rng, args.scenes, n)
    tv_f = rng.normal(0.5, 0.1, (min(args.scenes, 60), args.side, args.side))
    tv_w = np.ones_like(tv_f)

    rows = []
    for kernel, call in (
        ("fit_pixels", lambda mod: mod.fit_pixels(*fit_in, 0.02, 5)),
        ("detect_pixels", lambda mod: mod.detect_pixels(*det_in)),
        ("tv_solve", lambda mod: mod.tv_solve(tv_f, tv_w, 0.05, 1.0, 0.5,
                                              args.tv_iters, 1e-12)),
    ):
        times = {name: timed(call, mod, repeat=args.repeat)
                 for name, mod in backends.items()}
        rows.append((kernel, times))

    print(f"\n{'kernel':<15}" + "".join(f"{name:>12}" for name in backends)
          + ("     speedup" if len(backends) > 1 else ""))
    for kernel, times in rows:
        line = f"{kernel:<15}" + "".join(f"{times[name]*1e3:>10.1f}ms" for name in backends)
        if "cython" in times and "python" in times:
            line += f"{times['python'] / times['cython']:>11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
