import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mprsens.market import build_binomial, build_trinomial
from mprsens.oracle import (central_difference, conjugacy_residual, deficit_check, expansion_check, fd_u_delta,
                            fd_u_xdelta, fit_order, golden_section_one_period)
from mprsens.preferences import mixed_power_utility, power_utility
from mprsens.sensitivity import analyze
from mprsens.solver import solve

# one-period oracle, computed once by golden section on the scalar proportion
# and cross-checked against the closed form (0.5 * value)**4 / 0.5 of the
# myopic power problem on the standard tree
U_STANDARD_1_001 = 2.1718802138991795


def test_fit_order_examples():
    ts = [2.0 ** -e for e in range(2, 7)]
    assert fit_order([(t, t ** 3) for t in ts]) == pytest.approx(3.0)
    assert fit_order([(t, 5 * t ** 2) for t in ts]) == pytest.approx(2.0)
    assert fit_order([(t, 0.0) for t in ts]) == math.inf
    # points at rounding noise are dropped
    assert fit_order([(t, t ** 3 if t > 0.05 else 1e-17) for t in ts]) == pytest.approx(3.0)
    with pytest.raises(ValueError):
        fit_order([(0.1, 1.0), (0.2, 2.0)])


@settings(max_examples=30, deadline=None)
@given(k=st.floats(0.5, 5.0), c=st.floats(1e-3, 1e3))
def test_fit_order_recovers_power(k, c):
    ts = [2.0 ** -e for e in range(2, 7)]
    assert fit_order([(t, c * t ** k) for t in ts]) == pytest.approx(k, rel=1e-9)


def test_central_difference():
    assert central_difference(math.exp, 1e-2) == pytest.approx(1.0, abs=1e-9)
    assert central_difference(math.sin, 1e-2, richardson=False) == pytest.approx(1.0, abs=2e-5)


def test_golden_section_standard_value(standard_tree, power):
    # myopic power utility: the 4-step value is the one-period value to the 4th power
    one = build_binomial(1, 0.25, 0.2, 2.0, 1.0)
    _, val = golden_section_one_period(one, power, 1.0, 0.01)
    assert (0.5 * val) ** 4 / 0.5 == pytest.approx(U_STANDARD_1_001, rel=1e-12)
    assert solve(standard_tree, power, 1.0, 0.01).u0 == pytest.approx(U_STANDARD_1_001, rel=1e-13)


def test_golden_section_needs_one_period(standard_tree, power):
    with pytest.raises(ValueError):
        golden_section_one_period(standard_tree, power, 1.0)


def test_golden_section_zero_drift():
    m = build_trinomial(1, 1.0, 0.1, 0.0, 1.0)
    pi, _ = golden_section_one_period(m, power_utility(-1.0), 1.0, 0.0)
    assert pi == pytest.approx(0.0, abs=1e-6)


def test_fd_matches_analytic(mixed_binomial, mixed):
    _, _, rep = analyze(mixed_binomial, mixed, 1.0)
    assert fd_u_delta(mixed_binomial, mixed, 1.0) == pytest.approx(rep.u_delta, rel=1e-8)
    assert fd_u_xdelta(mixed_binomial, mixed, 1.0) == pytest.approx(-(rep.y / rep.x) * rep.axd, rel=1e-5)


@pytest.mark.parametrize("delta", [-0.2, 0.0, 0.3])
def test_conjugacy(mixed_binomial, mixed, delta):
    assert conjugacy_residual(mixed_binomial, mixed, 0.7, delta) <= 1e-12


def test_expansion_csv(tmp_path, standard_tree, power):
    pair, _, rep = analyze(standard_tree, power, 1.0)
    ec = expansion_check(standard_tree, power, pair, rep, rays=((1.0, 0.0),), exponents=(2, 3, 4))
    path = tmp_path / "expansion.csv"
    ec.to_csv(path)
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == 3 and list(rows[0]) == ["ray", "t", "u_oracle", "u_pred", "residual", "slope"]
    assert float(rows[0]["slope"]) > 2.5


def test_deficit_power_is_exact(standard_tree, power):
    pair, _, rep = analyze(standard_tree, power, 1.0)
    dc = deficit_check(standard_tree, power, pair, rep)
    assert max(abs(r[4]) for r in dc.rows) <= 1e-13
    assert dc.slopes["(1,1)"] == math.inf


def test_deficit_mixed_order():
    m = build_binomial(2, 0.5, 0.2, {"const": 2.0, "state": 3.0}, {"const": 1.0, "state": 5.0})
    util = mixed_power_utility([0.3, 0.7])
    pair, _, rep = analyze(m, util, 1.0)
    dc = deficit_check(m, util, pair, rep)
    assert min(r[4] for r in dc.rows) >= -1e-12
    assert dc.slopes["(1,1)"] >= 2.5


def test_optimizer_check_exact_prediction_is_not_a_failure():
    # nu = 0 with power utility: the optimizer prediction is exact, errors are rounding noise
    m = build_binomial(3, 0.25, 0.2, 2.0, 0.0)
    util = power_utility(0.5)
    pair, _, rep = analyze(m, util, 1.0)
    from mprsens.oracle import optimizer_check

    assert optimizer_check(m, util, pair, rep)["factors"] == [math.inf]
