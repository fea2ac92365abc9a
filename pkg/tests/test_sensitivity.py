import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import LAMBDA_STATE
from mprsens.market import build_binomial, build_trinomial, l_delta
from mprsens.preferences import power_utility
from mprsens.sensitivity import (SCHEMA_VERSION, analyze, build_attainable_space, config_hash, integrability_probe,
                                 one_step_martingale_residual, predict_expansion, predict_optimizer)
from mprsens.solver import solve, solve_unperturbed, value

STANDARD = dict(axx=0.5, axd=-0.08, add=-0.096, byy=2.0, byd=-0.1736111111111111, bdd=0.1280984760802469)
MIXED_BINOMIAL = dict(axx=0.4862133663083983, axd=-0.09790673126876033, add=-0.14330365844614368,
                      byy=2.0567102208492436, byd=-0.43694074300113345, bdd=0.7675580976290709)
MIXED_TRINOMIAL = dict(axx=0.49334608120426904, axd=-0.04808851712104782, add=-0.055895421442086306,
                       byy=2.026974649436714, byd=-0.20381349367463844, bdd=0.2648718993402829)


@pytest.mark.parametrize("fixture,util_name,frozen,u_delta", [
    ("standard_tree", "power", STANDARD, 25 / 144),
    ("mixed_binomial", "mixed", MIXED_BINOMIAL, 0.3427529598189052),
    ("mixed_trinomial", "mixed", MIXED_TRINOMIAL, 0.17366623036452128),
])
def test_frozen_coefficients(request, fixture, util_name, frozen, u_delta):
    m, util = request.getfixturevalue(fixture), request.getfixturevalue(util_name)
    _, _, rep = analyze(m, util, 1.0)
    for k, v in frozen.items():
        assert getattr(rep, k) == pytest.approx(v, rel=1e-10, abs=1e-13), k
    assert rep.u_delta == pytest.approx(u_delta, rel=1e-12)


def _fd2(f, h):
    return (f(h) - 2 * f(0.0) + f(-h)) / h ** 2


@pytest.mark.parametrize("fixture,util_name", [("mixed_binomial", "mixed"), ("mixed_trinomial", "mixed"),
                                               ("one_period", "mixed")])
def test_axx_add_against_value_function_differences(request, fixture, util_name):
    m, util = request.getfixturevalue(fixture), request.getfixturevalue(util_name)
    _, _, rep = analyze(m, util, 1.0)
    x, y = rep.x, rep.y
    uxx = _fd2(lambda h: value(m, util, x + h), 1e-3)
    udd = _fd2(lambda h: value(m, util, x, h), 1e-3)
    assert -(x / y) * uxx == pytest.approx(rep.axx, rel=1e-5)
    assert -(x / y) * udd == pytest.approx(rep.add, rel=1e-4, abs=1e-6)


def test_one_period_mixed_frozen(one_period, mixed):
    _, _, rep = analyze(one_period, mixed, 1.0)
    assert rep.axx == pytest.approx(0.4962637679693795, rel=1e-12)
    assert rep.add == pytest.approx(-0.021729465167911334, rel=1e-10)


def test_attainable_dimensions():
    util = power_utility(0.5)
    for steps, dim in ((1, 1), (2, 3), (3, 7)):
        pair = solve(build_binomial(steps, 0.25, 0.2, 2.0, 1.0), util, 1.0)
        space = build_attainable_space(pair)
        assert space.dim == dim and space.complement_dim == 0 and space.dimension_gap() == 0
    m = build_trinomial(2, 0.25, 0.2, 2.0, 1.0)
    space = build_attainable_space(solve(m, util, 1.0))
    assert space.dim == 4 and space.complement_dim == 4
    assert space.dim + space.complement_dim + 1 == m.n_leaves


def test_zero_direction_gives_zero_delta_terms():
    m = build_binomial(3, 0.25, 0.2, LAMBDA_STATE, 0.0)
    from mprsens.preferences import mixed_power_utility

    _, _, rep = analyze(m, mixed_power_utility([0.3, 0.7]), 1.0)
    for k in ("u_delta", "axd", "add", "byd", "bdd"):
        assert getattr(rep, k) == pytest.approx(0.0, abs=1e-14), k
    np.testing.assert_allclose(rep.m1, 0.0, atol=1e-14)


def test_complement_orthogonality(mixed_trinomial, mixed):
    _, space, rep = analyze(mixed_trinomial, mixed, 1.0)
    assert rep.residuals["orthogonality"] <= 1e-12
    # columns are conditionally orthonormal, so the gram is diagonal with the R-mass of each node
    gc = space.gram(which="complement").toarray()
    np.testing.assert_allclose(gc - np.diag(np.diag(gc)), 0.0, atol=1e-12)
    d = np.diag(gc)
    assert d[0] == pytest.approx(1.0, abs=1e-12) and d[1:].sum() == pytest.approx(1.0, abs=1e-12)


def test_predictions_at_origin(standard_tree, power):
    pair, _, rep = analyze(standard_tree, power, 1.0)
    assert predict_expansion(rep, pair.u0, pair.v0, 0.0, 0.0) == (pair.u0, pair.v0)
    pred = predict_optimizer(pair, rep, 0.0, 0.0)
    np.testing.assert_allclose(pred.multiplicative, pair.xhat_T)
    np.testing.assert_allclose(pred.dual_additive, pair.yhat_T)


def test_optimizer_prediction_first_order(mixed_binomial, mixed):
    pair, _, rep = analyze(mixed_binomial, mixed, 1.0)
    errs = []
    for t in (1e-2, 5e-3):
        truth = solve(mixed_binomial, mixed, 1.0 + t, t).xhat_T
        pred = predict_optimizer(pair, rep, t, t, l_delta(mixed_binomial, t)).multiplicative
        errs.append(np.max(np.abs(truth - pred)))
    assert errs[0] / errs[1] > 3.5  # second-order remainder


@settings(max_examples=10, deadline=None)
@given(c=st.floats(0.2, 5.0), p=st.sampled_from([-1.0, 0.5]))
def test_power_coefficient_scaling(c, p):
    # u(cx, delta) = c**p u(x, delta): axx, byy are scale free, the delta-terms carry powers of x or y
    m = build_binomial(2, 0.5, 0.2, 1.0, 1.0)
    util = power_utility(p)
    _, _, a = analyze(m, util, 1.0)
    _, _, b = analyze(m, util, c)
    ry = b.y / a.y
    for k, f in (("axx", 1.0), ("byy", 1.0), ("axd", c), ("add", c * c), ("byd", ry), ("bdd", ry * ry)):
        assert getattr(b, k) == pytest.approx(f * getattr(a, k), rel=1e-8, abs=1e-12), k
    assert a.axx == pytest.approx(1 - p, rel=1e-12)
    np.testing.assert_allclose(a.m0, 0.0, atol=1e-12)


def test_integrability_probe(standard_tree, power):
    pair = solve_unperturbed(standard_tree, power, 1.0)
    rows = integrability_probe(standard_tree, pair, [0.0, 1.0, 3.0])
    assert rows[0]["moment"] == pytest.approx(1.0)
    assert all(r["finite"] for r in rows)
    assert rows[0]["moment"] < rows[1]["moment"] < rows[2]["moment"]


def test_martingale_residual_detects_drift(standard_tree):
    assert one_step_martingale_residual(standard_tree, np.ones(standard_tree.n_nodes)) == 0.0
    assert one_step_martingale_residual(standard_tree, standard_tree.time + 1.0) > 0.1


def test_report_json(standard_tree, power):
    _, _, rep = analyze(standard_tree, power, 1.0)
    doc = json.loads(rep.to_json(config_hash({"a": 1})))
    assert doc["schema_version"] == SCHEMA_VERSION
    assert {"grad_u", "grad_v", "hessian_u", "hessian_v", "coefficients", "residuals", "kw"} <= set(doc)
    assert doc["hessian_u"][0][0] == pytest.approx(-rep.y * 0.5)
    assert config_hash({"b": 2, "a": 1}) == config_hash({"a": 1, "b": 2})
