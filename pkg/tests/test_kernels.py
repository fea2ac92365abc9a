import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mprsens import _kernels as K
from mprsens.market import build_binomial, build_trinomial, perturbed_returns
from mprsens.preferences import mixed_power_utility


def _tree(steps, tri):
    return (build_trinomial if tri else build_binomial)(steps, 0.25, 0.2, {"const": 1.0, "state": 2.0}, 1.0)


def _close(a, b):
    for u, v in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
        np.testing.assert_allclose(u, v, rtol=1e-12, atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(steps=st.integers(1, 5), tri=st.booleans(), seed=st.integers(0, 2**31))
def test_tree_kernels_agree(steps, tri, seed):
    m = _tree(steps, tri)
    rng = np.random.default_rng(seed)
    r = perturbed_returns(m, 0.0)
    util = mixed_power_utility([0.3, 0.7])
    leaf = rng.uniform(0.5, 2.0, m.n_leaves)
    b, g = util.du(leaf), util.d2u(leaf)
    edge = rng.standard_normal(m.n_nodes)
    nb, npy = K.numba_impl, K.numpy_impl
    _close(nb.forward_accumulate(m.parent, m.layer_ptr, edge, 0.3),
           npy.forward_accumulate(m.parent, m.layer_ptr, edge, 0.3))
    _close(nb.conditional_expectation(m.child_ptr, m.layer_ptr, m.prob, b),
           npy.conditional_expectation(m.child_ptr, m.layer_ptr, m.prob, b))
    coef = nb.newton_coefficients(m.child_ptr, m.layer_ptr, m.prob, r, b, g)
    _close(coef, npy.newton_coefficients(m.child_ptr, m.layer_ptr, m.prob, r, b, g))
    _close(nb.newton_forward(m.parent, m.child_ptr, m.layer_ptr, r, *coef),
           npy.newton_forward(m.parent, m.child_ptr, m.layer_ptr, r, *coef))
    yproc = npy.conditional_expectation(m.child_ptr, m.layer_ptr, m.prob, b)
    _close(nb.foc_terms(m.child_ptr, m.layer_ptr, m.prob, r, yproc),
           npy.foc_terms(m.child_ptr, m.layer_ptr, m.prob, r, yproc))


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 50), k=st.integers(1, 40), seed=st.integers(0, 2**31),
       coef=st.lists(st.floats(-3, 3), min_size=4, max_size=4))
def test_path_functionals_agree(n, k, seed, coef):
    dB = np.random.default_rng(seed).standard_normal((n, k)) / np.sqrt(k)
    c = np.asarray(coef)
    _close(K.numba_impl.path_functionals(dB, 1.0 / k, 0.3, 1.5, c),
           K.numpy_impl.path_functionals(dB, 1.0 / k, 0.3, 1.5, c))


def test_path_functionals_constant_direction():
    dB = np.random.default_rng(0).standard_normal((5, 8)) * 0.25
    dt, sigma, lam = 1 / 8, 0.2, 2.0
    m_T, F, G = K.IMPL.path_functionals(dB, dt, sigma, lam, np.array([1.5, 0, 0, 0]))
    np.testing.assert_allclose(m_T, sigma * dB.sum(axis=1))
    np.testing.assert_allclose(F, 1.5 * (lam * sigma ** 2 + m_T))
    # on paths G is the continuous bracket: nu^2 sigma^2 T
    np.testing.assert_allclose(G, 1.5 ** 2 * sigma ** 2)


@pytest.mark.parametrize("flag,expected", [("1", "numpy"), ("0", "numba")])
def test_env_flag_selects_backend(flag, expected):
    env = dict(os.environ, MPRSENS_DISABLE_NUMBA=flag)
    code = "from mprsens._kernels import IMPL; print(IMPL.name)"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expected


def test_solver_result_independent_of_backend():
    code = ("from mprsens.market import build_binomial; from mprsens.preferences import mixed_power_utility;"
            "from mprsens.solver import solve;"
            "p = solve(build_binomial(5, 0.2, 0.2, 2.0, 1.0), mixed_power_utility([0.3, 0.7]), 1.0, 0.1);"
            "print(repr(p.u0))")
    vals = []
    for flag in ("1", "0"):
        env = dict(os.environ, MPRSENS_DISABLE_NUMBA=flag)
        vals.append(float(subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                                         check=True).stdout))
    assert vals[0] == pytest.approx(vals[1], rel=1e-14)
