"""Numba kernels against their numpy fallbacks.

Run: python3 benchmarks/bench_kernels.py --steps 14 --paths 20000 --repeats 5
"""
import argparse
import time

import numpy as np

from mprsens import _kernels as K
from mprsens.market import build_binomial, perturbed_returns
from mprsens.preferences import power_utility


def best_of(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def tree_cases(m):
    r = perturbed_returns(m, 0.0)
    util = power_utility(0.5)
    leaf = np.exp(0.1 * m.accumulate(r)[m.leaf_start:]) + 0.5
    b, g = util.du(leaf), util.d2u(leaf)
    edge = r * 0.3
    yproc = K.numpy_impl.conditional_expectation(m.child_ptr, m.layer_ptr, m.prob, b)
    a, bco = K.numpy_impl.newton_coefficients(m.child_ptr, m.layer_ptr, m.prob, r, b, g)
    return {
        "forward_accumulate": lambda impl: impl.forward_accumulate(m.parent, m.layer_ptr, edge, 1.0),
        "conditional_expectation": lambda impl: impl.conditional_expectation(m.child_ptr, m.layer_ptr, m.prob, b),
        "newton_coefficients": lambda impl: impl.newton_coefficients(m.child_ptr, m.layer_ptr, m.prob, r, b, g),
        "newton_forward": lambda impl: impl.newton_forward(m.parent, m.child_ptr, m.layer_ptr, r, a, bco),
        "foc_terms": lambda impl: impl.foc_terms(m.child_ptr, m.layer_ptr, m.prob, r, yproc),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=14, help="binomial tree depth")
    ap.add_argument("--paths", type=int, default=20000)
    ap.add_argument("--path-steps", type=int, default=256)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    m = build_binomial(args.steps, 1.0 / args.steps, 0.2, 2.0, 1.0)
    cases = tree_cases(m)
    dB = np.random.default_rng(0).standard_normal((args.paths, args.path_steps)) / np.sqrt(args.path_steps)
    nu = np.array([1.0, 0.5, 3.0, 0.0])
    cases["path_functionals"] = lambda impl: impl.path_functionals(dB, 1.0 / args.path_steps, 0.2, 2.0, nu)

    print(f"tree: {m.n_nodes} nodes; paths: {args.paths} x {args.path_steps}")
    print(f"{'kernel':<26}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, call in cases.items():
        call(K.numba_impl)  # compile / load cache
        t_np = best_of(lambda: call(K.numpy_impl), args.repeats)
        t_nb = best_of(lambda: call(K.numba_impl), args.repeats)
        print(f"{name:<26}{t_np:>12.3f}{t_nb:>12.3f}{t_np / max(t_nb, 1e-9):>9.1f}x")


if __name__ == "__main__":
    main()
