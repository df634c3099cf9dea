"""Compare the compiled and pure-Python tape backends.

Times recording plus one reverse sweep for the logistic-map recursion and for
the gradient and a Hessian-vector product of a GMM log-likelihood.

    python benchmarks/bench_tape.py [--repeats 5]
"""
import argparse
import time

import numpy as np

from mixfit import autodiff as ad
from mixfit.mixture import GmmParams, gmm_objective


def best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def logistic_case(n):
    def run(backend):
        return ad.grad(lambda xs: ad.logistic_map(xs[0], n), [0.3], backend=backend)
    return run


def gmm_case(n_rows, hvp):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(n_rows, 3))
    theta = GmmParams(np.zeros(3), rng.normal(size=(3, 3)), np.tile(np.eye(3), (3, 1, 1)))
    v0 = theta.pack()
    d = rng.normal(size=v0.size)

    def run(backend):
        obj = gmm_objective(x, 3, backend=backend)
        if hvp:
            return obj.linearize(v0).hvp(d)
        return obj.value_and_grad(v0)
    return run


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args(argv)
    backends = ad.available_backends()
    cases = [
        ("logistic n=1000 grad", logistic_case(1000)),
        ("logistic n=10000 grad", logistic_case(10000)),
        ("gmm G=3 p=3 n=500 grad", gmm_case(500, hvp=False)),
        ("gmm G=3 p=3 n=500 hvp", gmm_case(500, hvp=True)),
    ]
    header = f"{'case':28s}" + "".join(f"{b + ' ms':>14s}" for b in backends)
    if "cython" in backends:
        header += f"{'speedup':>10s}"
    print(header)
    for name, run in cases:
        times = {b: best_of(lambda: run(b), args.repeats) for b in backends}
        line = f"{name:28s}" + "".join(f"{times[b] * 1000:14.2f}" for b in backends)
        if "cython" in backends:
            line += f"{times['python'] / times['cython']:9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
