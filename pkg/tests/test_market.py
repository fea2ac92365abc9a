import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mprsens.errors import InvalidMarket, NonPositiveExponential
from mprsens.market import (build_binomial, build_lattice, build_trinomial, compute_F_G, from_json, l_delta,
                            l_delta_process, perturbed_returns, positivity_radius, zeta)


def test_one_period_binomial_layout():
    m = build_binomial(1, 1.0, 0.1)
    assert m.n_nodes == 3
    np.testing.assert_allclose(m.dM[1:], [0.1, -0.1])
    np.testing.assert_allclose(m.prob[1:], [0.5, 0.5])
    assert m.qv[0] == pytest.approx(0.01)


def test_qv_is_sigma_squared_dt():
    m = build_binomial(2, 0.5, 0.2)
    np.testing.assert_allclose(m.qv[: m.leaf_start], 0.02)


def test_four_step_invariants():
    m = build_binomial(4, 0.25, 0.2, 0.5)
    assert m.n_internal == 15
    res = m.invariant_residuals()
    assert max(res.values()) < 1e-15


@pytest.mark.parametrize("bad", [dict(steps=0, dt=1, sigma=0.1), dict(steps=1, dt=0, sigma=0.1),
                                 dict(steps=1, dt=1, sigma=-0.1)])
def test_rejects_nonpositive_inputs(bad):
    with pytest.raises((InvalidMarket, ValueError)):
        build_binomial(bad["steps"], bad["dt"], bad["sigma"])


def test_rejects_arbitrage():
    # lambda so large that both returns are positive
    with pytest.raises(InvalidMarket):
        build_binomial(1, 1.0, 0.1, 50.0)


def test_perturbed_returns_zero_delta_is_base():
    m = build_binomial(2, 0.5, 0.2, 2.0, 1.0)
    np.testing.assert_array_equal(perturbed_returns(m, 0.0), m.base_returns())
    np.testing.assert_allclose(m.base_returns()[1:], m.parent_values(m.lam)[1:] * m.parent_values(m.qv)[1:] + m.dM[1:])


def test_perturbed_returns_one_period_value():
    # the exact edge return keeps X -> X / L^delta a bijection of wealth processes:
    # 0.1 / (1 - 0.3 * 0.1) rather than the linearised 0.1 + 0.3 * 0.01
    m = build_binomial(1, 1.0, 0.1, 0.0, 1.0)
    r = perturbed_returns(m, 0.3)
    assert r[1] == pytest.approx(0.1 / 0.97, abs=1e-15)
    assert r[1] == pytest.approx(0.103, abs=1e-3)


def test_zero_direction_leaves_returns_unchanged():
    m = build_binomial(2, 0.5, 0.2, 2.0, 0.0)
    np.testing.assert_array_equal(perturbed_returns(m, 0.7), m.base_returns())


def test_F_G_examples():
    m = build_binomial(1, 1.0, 0.1, 0.0, 1.0)
    F, G = compute_F_G(m)
    np.testing.assert_allclose(F, [0.1, -0.1])
    np.testing.assert_allclose(G, [0.01, 0.01])
    m2 = build_binomial(2, 1.0, 0.1, 0.0, 1.0)
    F2, G2 = compute_F_G(m2)
    np.testing.assert_allclose(G2, 0.02)
    np.testing.assert_allclose(F2, m2.accumulate(m2.dM)[m2.leaf_start:])
    F0, G0 = compute_F_G(build_binomial(2, 1.0, 0.1, 2.0, 0.0))
    assert not F0.any() and not G0.any()


def test_l_delta_examples():
    m = build_binomial(1, 1.0, 0.1, 0.0, 1.0)
    np.testing.assert_array_equal(l_delta(m, 0.0), 1.0)
    np.testing.assert_allclose(l_delta(m, 0.5), [0.95, 1.05])
    with pytest.raises(NonPositiveExponential):
        l_delta(m, 20.0)


def test_positivity_radius_brackets_failure():
    m = build_binomial(1, 1.0, 0.1, 0.0, 1.0)
    lo, hi = positivity_radius(m)
    assert lo == pytest.approx(-10.0) and hi == pytest.approx(10.0)
    l_delta(m, 0.999 * hi)
    with pytest.raises(NonPositiveExponential):
        l_delta(m, hi)


def test_zeta_examples():
    m = build_binomial(1, 1.0, 0.1, 0.0, 1.0)
    np.testing.assert_array_equal(zeta(m, 0.0), 1.0)
    np.testing.assert_allclose(zeta(m, 1.0), math.exp(0.11))
    np.testing.assert_array_equal(zeta(build_binomial(2, 1.0, 0.1, 1.0, 0.0), 3.0, 0.2), 1.0)


def test_json_round_trip(tmp_path):
    m = build_trinomial(2, 0.25, 0.2, {"const": 2.0, "state": 1.0}, 1.0)
    path = tmp_path / "tree.json"
    m.to_json(path)
    back = from_json(str(path))
    for name in ("parent", "prob", "dM", "qv", "lam", "nu"):
        np.testing.assert_array_equal(getattr(back, name), getattr(m, name))
    assert back.to_dict()["format"] == m.to_dict()["format"]


def test_node_cap():
    with pytest.raises(InvalidMarket):
        build_binomial(12, 0.1, 0.2, node_cap=1000)


def _random_strategy_wealth(m, returns, prop):
    fac = 1.0 + m.parent_values(prop) * returns
    fac[0] = 1.0
    return np.exp(m.accumulate(np.log(fac)))[m.leaf_start:]


@settings(max_examples=40, deadline=None)
@given(steps=st.integers(1, 2), lam=st.floats(-3, 3), nu=st.floats(-3, 3), delta=st.floats(-2, 2),
       tri=st.booleans(), seed=st.integers(0, 10_000))
def test_wealth_bijection_divides_by_L(steps, lam, nu, delta, tri, seed):
    build = build_trinomial if tri else build_binomial
    m = build(steps, 0.25, 0.2, lam, nu)
    lo, hi = positivity_radius(m)
    if not lo < delta < hi:
        return
    rng = np.random.default_rng(seed)
    r0 = m.base_returns()
    rd = perturbed_returns(m, delta)
    # proportions kept inside the positivity region of the 0-model
    bound = 0.9 / np.max(np.abs(r0[1:]))
    prop = np.r_[rng.uniform(-bound, bound, m.leaf_start), np.zeros(m.n_leaves)]
    x0 = _random_strategy_wealth(m, r0, prop)
    shifted = prop + delta * np.r_[m.nu[: m.leaf_start], np.zeros(m.n_leaves)]
    xd = _random_strategy_wealth(m, rd, shifted)
    np.testing.assert_allclose(xd, x0 / l_delta(m, delta), rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(steps=st.integers(1, 4), dt=st.floats(0.05, 1.0), sigma=st.floats(0.05, 0.5),
       lam=st.floats(-2, 2), nu0=st.floats(-2, 2), nu1=st.floats(-5, 5), tri=st.booleans())
def test_invariants_and_G_nonnegative(steps, dt, sigma, lam, nu0, nu1, tri):
    build = build_trinomial if tri else build_binomial
    try:
        m = build(steps, dt, sigma, lam, {"const": nu0, "state": nu1})
    except InvalidMarket:
        return  # lambda*qv larger than the move: arbitrage, rejected
    assert max(m.invariant_residuals().values()) < 1e-12
    F, G = compute_F_G(m)
    assert np.all(G >= 0)
    assert np.all(zeta(m, 0.5) >= 1.0)


def test_lattice_accepts_custom_moves():
    m = build_lattice(2, 0.5, [(0.25, 0.2), (0.5, 0.0), (0.25, -0.2)], 0.1, 0.0)
    assert m.n_leaves == 9
    assert not m.is_complete()
    np.testing.assert_allclose(m.qv[0], 0.02)


def test_l_delta_process_is_zero_model_wealth():
    m = build_binomial(3, 0.25, 0.2, 1.0, {"const": 1.0, "state": 2.0})
    delta = 0.4
    proc = l_delta_process(m, delta)
    prop = np.r_[-delta * m.nu[: m.leaf_start], np.zeros(m.n_leaves)]
    np.testing.assert_allclose(proc[m.leaf_start:], _random_strategy_wealth(m, m.base_returns(), prop), rtol=1e-14)
