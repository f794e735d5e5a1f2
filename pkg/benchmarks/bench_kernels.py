"""Compare the compiled and pure-Python kernel backends.

    python3 benchmarks/bench_kernels.py [--n 4096] [--repeat 20]

Prints the median time per call for each backend and checks that both
produce the same bits.
"""

import argparse
import statistics
import time

import numpy as np

from merl_rl import kernels


def _median_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def make_inputs(n, n_params, seed=0):
    rng = np.random.default_rng(seed)
    terminals = rng.random(n) < 0.01
    ends = terminals.copy()
    ends[-1] = True
    stops = np.flatnonzero(ends)
    starts = np.concatenate([[0], stops[:-1] + 1])
    return {
        "rewards": rng.standard_normal(n),
        "values": rng.standard_normal(n),
        "next_values": rng.standard_normal(n),
        "terminals": terminals,
        "ends": ends,
        "starts": starts,
        "stops": stops,
        "p": rng.standard_normal(n_params),
        "g": rng.standard_normal(n_params),
        "m": rng.standard_normal(n_params) * 0.1,
        "v": rng.random(n_params),
        "aux_out": rng.standard_normal((64, 5)),
        "idx": rng.choice(n, size=64, replace=False),
        "unit": rng.standard_normal((n, 4)) / 2.0,
        "valid": rng.random(n) < 0.9,
    }


def cases(x):
    return {
        "gae": lambda impl: kernels.gae(x["rewards"], x["values"], x["next_values"], x["terminals"],
                                        x["ends"], 0.99, 0.95, impl=impl),
        "segment_vex": lambda impl: kernels.segment_vex(x["rewards"], x["values"], x["starts"],
                                                        x["stops"], impl=impl),
        "adam": lambda impl: kernels.adam(x["p"], x["g"], x["m"], x["v"], 3e-4, 0.9, 0.999, 1e-8, 7,
                                          impl=impl),
        "aux_losses": lambda impl: kernels.aux_losses(x["aux_out"], x["idx"], x["values"], x["valid"], x["unit"],
                                                      x["valid"], 0.5, 0.01, 0, 1, 1e-8, impl=impl),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=4096, help="rollout length")
    ap.add_argument("--params", type=int, default=9000, help="flat parameter count for adam")
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    x = make_inputs(args.n, args.params)
    print(f"default backend: {kernels.BACKEND}; available: {', '.join(sorted(backends))}")
    print(f"{'kernel':<12} " + " ".join(f"{b:>12}" for b in sorted(backends)) + "   speedup  identical")
    for name, fn in cases(x).items():
        times = {b: _median_time(lambda: fn(impl), args.repeat) for b, impl in backends.items()}
        outs = {b: fn(impl) for b, impl in backends.items()}
        ref = outs["python"]
        same = all(all(np.array_equal(a, b) for a, b in zip(o, ref)) if isinstance(o, tuple)
                   else np.array_equal(o, ref) for o in outs.values())
        speed = times["python"] / times["cython"] if "cython" in times else 1.0
        cols = " ".join(f"{1e3 * times[b]:>10.3f}ms" for b in sorted(backends))
        print(f"{name:<12} {cols}   {speed:6.1f}x  {same}")


if __name__ == "__main__":
    main()
