"""Brute-force ground truth for the perturbed problem and convergence-order fits."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .market import TreeMarket, perturbed_returns
from .preferences import UtilitySpec
from .sensitivity import SensitivityReport, predict_expansion, predict_optimizer
from .solver import OptimalPair, solve

RAYS = ((1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (1.0, -1.0))
DEFAULT_R0 = 0.05
DEFAULT_EXPONENTS = (2, 3, 4, 5, 6)
NOISE_FLOOR = 1e-14
FD_STEP = 1e-4
OPTIMIZER_FLOOR = 1e-13


def brute_solve(m: TreeMarket, util: UtilitySpec, x: float, delta: float = 0.0) -> OptimalPair:
    """Optimal pair of the delta-model, solved directly on the perturbed returns."""
    return solve(m, util, x, delta)


def golden_section_one_period(m: TreeMarket, util: UtilitySpec, x: float, delta: float = 0.0, tol: float = 1e-12):
    """Scalar search for the optimal proportion on a one-period tree; returns ``(pi, value)``."""
    if m.steps != 1:
        raise ValueError("golden-section oracle is for one-period trees")
    r = perturbed_returns(m, delta)[1:]
    q = m.prob[1:]
    lo, hi = -1.0 / r.max(), -1.0 / r.min()
    pad = 1e-9 * (hi - lo)
    f = lambda p: -float(np.dot(q, util.u(x * (1.0 + p * r))))
    res = optimize.minimize_scalar(f, bounds=(lo + pad, hi - pad), method="bounded", options={"xatol": tol})
    a, b = max(lo + pad, res.x - 1e-3), min(hi - pad, res.x + 1e-3)
    gs = optimize.minimize_scalar(f, bracket=(a, res.x, b), method="golden", tol=tol)
    return float(gs.x), -float(gs.fun)


def fit_order(pairs, floor: float = NOISE_FLOOR) -> float:
    """Least-squares slope of ``log residual`` against ``log t``.

    Residuals at or below ``floor`` are rounding noise and are dropped; with
    fewer than two points left the fit is degenerate and ``+inf`` is returned.
    """
    arr = np.asarray(pairs, dtype=float).reshape(-1, 2)
    if len(arr) < 3:
        raise ValueError("need at least three (t, residual) pairs")
    t, res = arr[:, 0], np.abs(arr[:, 1])
    keep = res > floor
    if keep.sum() < 2:
        return math.inf
    return float(np.polyfit(np.log(t[keep]), np.log(res[keep]), 1)[0])


def central_difference(f, h: float, richardson: bool = True) -> float:
    """``f'(0)`` by central differences, optionally with one Richardson step."""
    d = lambda s: (f(s) - f(-s)) / (2.0 * s)
    if not richardson:
        return d(h)
    return (4.0 * d(h / 2) - d(h)) / 3.0


def fd_u_delta(m: TreeMarket, util: UtilitySpec, x: float, h: float = FD_STEP) -> float:
    return central_difference(lambda d: solve(m, util, x, d).u0, h)


def fd_u_xdelta(m: TreeMarket, util: UtilitySpec, x: float, h: float = 1e-2) -> float:
    """Mixed partial from the marginal value ``u_x(x, delta)`` differenced in delta."""
    return central_difference(lambda d: solve(m, util, x, d).y, h)


def conjugacy_residual(m: TreeMarket, util: UtilitySpec, x: float, delta: float) -> float:
    """``|u(x,d) - v(y_d,d) - x y_d|`` with ``v`` from an independent dual evaluation."""
    from .solver import dual_value

    pair = solve(m, util, x, delta)
    return abs(pair.u0 - dual_value(m, util, pair.y, delta) - x * pair.y)


@dataclass(eq=False)
class ExpansionCheck:
    rows: list = field(default_factory=list)  # (ray, t, u_oracle, u_pred, residual)
    slopes: dict = field(default_factory=dict)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["ray", "t", "u_oracle", "u_pred", "residual", "slope"])
            for ray, t, uo, up, res in self.rows:
                wr.writerow([ray, repr(t), repr(uo), repr(up), repr(res), repr(self.slopes[ray])])


def _ray_name(ray) -> str:
    return f"({ray[0]:g},{ray[1]:g})"


def expansion_check(m: TreeMarket, util: UtilitySpec, pair: OptimalPair, report: SensitivityReport,
                    rays=RAYS, r0: float = DEFAULT_R0, exponents=DEFAULT_EXPONENTS) -> ExpansionCheck:
    """Oracle value against the second-order prediction along shrinking rays."""
    out = ExpansionCheck()
    ts = [2.0 ** -e for e in exponents]
    for ray in rays:
        name = _ray_name(ray)
        pts = []
        for t in ts:
            dx, dd = t * r0 * ray[0], t * r0 * ray[1]
            uo = solve(m, util, pair.x + dx, dd).u0
            up, _ = predict_expansion(report, pair.u0, pair.v0, dx, dd)
            out.rows.append((name, t, uo, up, abs(uo - up)))
            pts.append((t, abs(uo - up)))
        out.slopes[name] = fit_order(pts)
    return out


def deficit_check(m: TreeMarket, util: UtilitySpec, pair: OptimalPair, report: SensitivityReport,
                  rays=((1.0, 1.0),), r0: float = DEFAULT_R0, exponents=DEFAULT_EXPONENTS) -> ExpansionCheck:
    """``u(x+dx, delta) - E[U(corrected wealth)]`` along shrinking rays (``u_pred`` holds the strategy value)."""
    from .strategies import strategy_value

    out = ExpansionCheck()
    ts = [2.0 ** -e for e in exponents]
    for ray in rays:
        name = _ray_name(ray)
        pts = []
        for t in ts:
            dx, dd = t * r0 * ray[0], t * r0 * ray[1]
            uo = solve(m, util, pair.x + dx, dd).u0
            us = strategy_value(pair, report, dx, dd)
            out.rows.append((name, t, uo, us, uo - us))
            pts.append((t, uo - us))
        out.slopes[name] = fit_order(pts)
    return out


def optimizer_check(m: TreeMarket, util: UtilitySpec, pair: OptimalPair, report: SensitivityReport,
                    ray=(1.0, 1.0), r0: float = DEFAULT_R0, exponents=DEFAULT_EXPONENTS) -> dict:
    """Leafwise oracle-vs-prediction optimizer deviation divided by the step size."""
    ratios = []
    dual_ratios = []
    for e in exponents:
        t = 2.0 ** -e
        dx, dd = t * r0 * ray[0], t * r0 * ray[1]
        norm = math.hypot(dx, dd)
        oracle = solve(m, util, pair.x + dx, dd)
        pred = predict_optimizer(pair, report, dx, dd, dy=oracle.y - pair.y)
        ratios.append(float(np.max(np.abs(oracle.xhat_T - pred.multiplicative))) / norm)
        dual_ratios.append(float(np.max(np.abs(oracle.yhat_T - pred.dual_multiplicative))) / norm)
    errs = [r * math.hypot(2.0 ** -e * r0 * ray[0], 2.0 ** -e * r0 * ray[1]) for r, e in zip(ratios, exponents)]
    # step pairs whose errors sit at rounding level carry no convergence information
    factors = [a / b for a, b, ea, eb in zip(ratios[:-1], ratios[1:], errs[:-1], errs[1:])
               if ea > OPTIMIZER_FLOOR and eb > OPTIMIZER_FLOOR]
    return {"ratios": ratios, "dual_ratios": dual_ratios, "factors": factors or [math.inf]}
