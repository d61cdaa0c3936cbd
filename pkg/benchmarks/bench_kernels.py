"""Time the compiled and numpy kernel backends on identical inputs.

    python benchmarks/bench_kernels.py [--n 20000] [--order 10] [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from deeptrafo import kernels


def make_inputs(n, order, seed=0):
    rng = np.random.default_rng(seed)
    gamma = rng.normal(size=(n, order + 1))
    theta = np.cumsum(np.concatenate([gamma[:, :1], np.exp(gamma[:, 1:])], axis=1), axis=1)
    a = rng.uniform(0.5, 3.0, n)
    b = rng.normal(size=n)
    alpha = rng.uniform(0.5, 2.0, n)
    beta = rng.normal(size=n)
    y = rng.normal(size=n)
    yt = rng.uniform(0.0, 1.0, n)
    return dict(yt=yt, theta=theta, a=a, b=b, alpha=alpha, beta=beta, y=y, order=order)


def cases(impl, d):
    z = impl.flow_transform(d["a"], d["b"], d["theta"], d["alpha"], d["beta"], d["y"])
    lo, hi = np.full(z.size, -60.0), np.full(z.size, 60.0)
    return {
        "bernstein_values": lambda: impl.bernstein_values(d["yt"], d["theta"]),
        "slope_theta_grad": lambda: impl.slope_theta_grad(d["yt"], d["order"]),
        "flow_transform": lambda: impl.flow_transform(d["a"], d["b"], d["theta"], d["alpha"], d["beta"], d["y"]),
        "invert_flow": lambda: impl.invert_flow(d["a"], d["b"], d["theta"], d["alpha"], d["beta"], z, lo, hi),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=20000)
    ap.add_argument("--order", type=int, default=10)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    d = make_inputs(args.n, args.order)
    timings = {}
    for name, impl in backends.items():
        for case, fn in cases(impl, d).items():
            number = 1 if case == "invert_flow" else 10
            best = min(timeit.repeat(fn, number=number, repeat=args.repeat)) / number
            timings[(case, name)] = best
    names = sorted(backends)
    print(f"n={args.n} order={args.order} (best of {args.repeat}, ms per call)")
    print(f"{'kernel':<18}" + "".join(f"{n:>12}" for n in names) + ("     speedup" if len(names) > 1 else ""))
    for case in cases(backends["python"], d):
        row = [timings[(case, n)] * 1e3 for n in names]
        line = f"{case:<18}" + "".join(f"{v:>12.3f}" for v in row)
        if "cython" in backends:
            line += f"{timings[(case, 'python')] / timings[(case, 'cython')]:>11.1f}x"
        print(line)
    print(f"selected backend: {kernels.BACKEND}")


if __name__ == "__main__":
    main()
