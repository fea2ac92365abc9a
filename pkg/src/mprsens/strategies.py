"""Corrected trading strategies that match the value function to second order.

The correction integrands act on ``M^R``, the stock return measured in units
of the optimal wealth.  On a tree its increment over an edge is
``dS / (1 + pi_hat dS)``, so that ``(1 + (pi_hat + c) dS) = (1 + pi_hat dS)(1 + c dM^R)``
holds exactly.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateIncrement, PositivityViolation
from .market import TreeMarket, perturbed_returns
from .sensitivity import SensitivityReport, _edge_gain
from .solver import OptimalPair

EPS_MIN = 1e-3
EPS_MAX = 1.0


def mr_increments(pair: OptimalPair) -> np.ndarray:
    """Per non-root node: increment of ``M^R`` on the edge into it."""
    return _edge_gain(pair)


def derive_gammas(pair: OptimalPair, report: SensitivityReport, m: TreeMarket | None = None):
    """Integrands ``gamma^i`` with ``gamma^i . M^R = M^i(x,0)/x`` at every node.

    Returns ``(gamma0, gamma1, residual)``; the residual is the leafwise
    reconstruction error of both terminal values.
    """
    m = pair.market if m is None else m
    g = mr_increments(pair)
    par = m.parent[1:]
    ls = m.leaf_start
    xy = pair.wealth * pair.yhat_process
    qr = m.prob[1:] * xy[1:] / xy[par]
    den = np.zeros(ls)
    np.add.at(den, par, qr * g[1:] ** 2)
    out = []
    resid = 0.0
    for target in (report.m0, report.m1):
        proc = pair.r_cond_expect(target) / pair.x
        jump = proc[1:] - proc[par]
        num = np.zeros(ls)
        np.add.at(num, par, qr * jump * g[1:])
        big = np.zeros(ls)
        np.maximum.at(big, par, np.abs(jump))
        bad = (den == 0) & (big > 1e-14)
        if np.any(bad):
            raise DegenerateIncrement(f"M^R does not move at node {int(np.flatnonzero(bad)[0])}")
        gamma = np.divide(num, den, out=np.zeros(ls), where=den > 0)
        rebuilt = pair.x * m.accumulate(m.parent_values(np.r_[gamma, np.zeros(m.n_leaves)]) * g)[ls:]
        resid = max(resid, float(np.max(np.abs(rebuilt - target))))
        out.append(gamma)
    return out[0], out[1], resid


def select_epsilon(dx: float, delta: float, eps_min: float = EPS_MIN, eps_max: float = EPS_MAX) -> float:
    """Truncation level ``(dx^2 + delta^2)^(1/4)`` clamped to ``[eps_min, eps_max]``."""
    if dx == 0 and delta == 0:
        raise ValueError("(dx, delta) must not both vanish")
    return float(np.clip((dx * dx + delta * delta) ** 0.25, eps_min, eps_max))


def _active(m: TreeMarket, trigger: np.ndarray) -> np.ndarray:
    """Internal node is active iff neither it nor an ancestor triggered."""
    hit = m.accumulate(m.parent_values(trigger.astype(float)), 0.0) + trigger
    return hit[: m.leaf_start] == 0


@dataclass(eq=False)
class CorrectedStrategy:
    x: float
    dx: float
    delta: float
    eps: float
    pi_hat: np.ndarray
    nu: np.ndarray
    gamma0: np.ndarray
    gamma1: np.ndarray
    sigma_active: np.ndarray  # gamma0 still applied at the node
    tau_active: np.ndarray  # gamma1 still applied at the node

    @property
    def gamma0_eps(self) -> np.ndarray:
        return np.where(self.sigma_active, self.gamma0, 0.0)

    @property
    def gamma1_eps(self) -> np.ndarray:
        return np.where(self.tau_active, self.gamma1, 0.0)

    @property
    def proportion(self) -> np.ndarray:
        return self.pi_hat + self.dx * self.gamma0_eps + self.delta * (self.nu + self.gamma1_eps)

    def to_csv(self, path, m: TreeMarket):
        ls = m.leaf_start
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["node", "time", "pi_hat", "gamma0", "gamma1", "sigma_stopped", "tau_stopped"])
            for i in range(ls):
                wr.writerow([i, repr(float(m.time[i])), repr(float(self.pi_hat[i])), repr(float(self.gamma0[i])),
                             repr(float(self.gamma1[i])), int(not self.sigma_active[i]), int(not self.tau_active[i])])


def corrected_strategy(pair: OptimalPair, report: SensitivityReport, dx: float, delta: float,
                       eps: float | None = None) -> CorrectedStrategy:
    m = pair.market
    x = pair.x
    eps = select_epsilon(dx, delta) if eps is None else float(eps)
    g0, g1, _ = derive_gammas(pair, report, m)
    bound = x / eps
    ls = m.leaf_start
    stops = []
    for gamma in (g0, g1):
        g = np.r_[gamma, np.zeros(m.n_leaves)]
        proc = m.accumulate(m.parent_values(g) * mr_increments(pair) * x)
        bracket = m.accumulate(m.parent_values(g * g * m.qv) * x * x)
        stops.append(_active(m, (np.abs(proc) >= bound) | (bracket >= bound)))
    return CorrectedStrategy(
        x=x, dx=float(dx), delta=float(delta), eps=eps, pi_hat=pair.pi_hat, nu=m.nu[:ls],
        gamma0=g0, gamma1=g1, sigma_active=stops[0], tau_active=stops[1],
    )


def corrected_wealth(cs: CorrectedStrategy, m: TreeMarket) -> np.ndarray:
    """Leafwise ``(x + dx) * prod(1 + proportion * dS^delta)``."""
    r = perturbed_returns(m, cs.delta)
    prop = np.r_[cs.proportion, np.zeros(m.n_leaves)]
    fac = 1.0 + m.parent_values(prop) * r
    fac[0] = 1.0
    if np.any(fac <= 0):
        bad = int(m.parent[np.flatnonzero(fac <= 0)[0]])
        raise PositivityViolation(f"wealth factor non-positive below node {bad}", node=bad)
    if cs.x + cs.dx <= 0:
        raise PositivityViolation("initial wealth x + dx must be positive", node=0)
    return (cs.x + cs.dx) * np.exp(m.accumulate(np.log(fac)))[m.leaf_start:]


def strategy_value(pair: OptimalPair, report: SensitivityReport, dx: float, delta: float,
                   eps: float | None = None) -> float:
    """``E[U(X_T)]`` of the corrected strategy."""
    m = pair.market
    cs = corrected_strategy(pair, report, dx, delta, eps)
    return m.expect(pair.util.u(corrected_wealth(cs, m)))
