"""Second-order coefficients through the risk-tolerance numeraire.

When the risk-tolerance wealth ``R`` exists, measuring wealth in units of
``R/R_0`` under the measure ``R~`` (density ``R_T Y_T/(R_0 y)``) turns the
problem for ``a(d,d)`` into a single Kunita-Watanabe projection of
``P_T = (A(X_T) - 1) x F`` onto the attainable gains.  On a tree the
projection is a one-step weighted regression per node.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import RiskToleranceMissing
from .solver import OptimalPair, measure_r_tilde


@dataclass(frozen=True, eq=False)
class KWDecomposition:
    p0: float
    p_T: np.ndarray
    m_tilde_T: np.ndarray
    n_tilde_T: np.ndarray
    theta: np.ndarray  # hedge ratio per internal node against the R-numeraire return
    c_a: float
    c_b: float
    weights: np.ndarray  # R~ leaf weights

    def expect(self, f) -> float:
        return float(np.dot(self.weights, f))

    @property
    def reconstruction_residual(self) -> float:
        return float(np.max(np.abs(self.p_T - self.p0 + self.m_tilde_T + self.n_tilde_T)))

    @property
    def orthogonality_residual(self) -> float:
        return abs(self.expect(self.m_tilde_T * self.n_tilde_T))


def _require_rt(pair: OptimalPair):
    if not pair.rt_exists:
        raise RiskToleranceMissing("the risk-tolerance wealth process does not exist for this instance")
    return pair.rt


def kw_decompose(pair: OptimalPair, F, G=None, m=None) -> KWDecomposition:
    """Split ``P_T = P_0 - M~_T - N~_T`` under ``R~`` with ``M~`` attainable in the ``R`` numeraire."""
    rt = _require_rt(pair)
    m = pair.market if m is None else m
    F = np.asarray(F, dtype=float)
    G = np.zeros_like(F) if G is None else np.asarray(G, dtype=float)
    x, y = pair.x, pair.y
    A = pair.util.rra(pair.xhat_T)
    wt = measure_r_tilde(pair)
    dens = pair.r_weights  # R weights, for the constants

    ls = m.leaf_start
    p_T = (A - 1.0) * x * F
    lp = m.leaf_prob()
    z_leaf = wt / lp
    z = m.cond_expect(z_leaf)
    p_proc = m.cond_expect(z_leaf * p_T) / z

    par = m.parent[1:]
    qt = m.prob[1:] * z[1:] / z[par]  # conditional R~ probabilities
    rho = rt.proportion
    r = pair.returns[1:]
    gt = r / (1.0 + rho[par] * r)
    dp = p_proc[1:] - p_proc[par]
    num = np.zeros(ls)
    den = np.zeros(ls)
    np.add.at(num, par, qt * dp * gt)
    np.add.at(den, par, qt * gt * gt)
    theta = num / den
    hedged = np.zeros(m.n_nodes)
    hedged[1:] = theta[par] * gt
    m_tilde = -m.accumulate(hedged)[ls:]
    resid = np.zeros(m.n_nodes)
    resid[1:] = dp - theta[par] * gt
    n_tilde = -m.accumulate(resid)[ls:]

    c_a = x * x * float(np.dot(dens, F * F * (A - 1.0) / A - G))
    c_b = y * y * float(np.dot(dens, G + F * F * (1.0 - A)))
    return KWDecomposition(
        p0=float(p_proc[0]), p_T=p_T, m_tilde_T=m_tilde, n_tilde_T=n_tilde, theta=theta,
        c_a=c_a, c_b=c_b, weights=wt,
    )


def recover_m1_n1(kw: KWDecomposition, pair: OptimalPair):
    """Terminal ``M^1`` and ``N^1`` in the original numeraire."""
    _require_rt(pair)
    A = pair.util.rra(pair.xhat_T)
    return kw.m_tilde_T / A, (pair.y / pair.x) * kw.n_tilde_T


def hessian_from_kw(kw: KWDecomposition, pair: OptimalPair, axx: float | None = None):
    """``(add, bdd, axd, byd)`` from the decomposition alone."""
    rt = _require_rt(pair)
    x, y, r0 = pair.x, pair.y, rt.r0
    axx = x / r0 if axx is None else axx
    add = (r0 / x) * (kw.expect(kw.n_tilde_T ** 2) + kw.p0 ** 2) + kw.c_a
    bdd = (r0 / x) * (y / x) ** 2 * (kw.expect(kw.m_tilde_T ** 2) + kw.p0 ** 2) + kw.c_b
    axd = kw.p0
    byd = (y / x) * kw.p0 / axx
    return add, bdd, axd, byd


def kw_report(pair: OptimalPair, report) -> dict:
    """Decomposition summary and agreement with the direct quadratic programs."""
    kw = kw_decompose(pair, report.F, report.G)
    add, bdd, axd, byd = hessian_from_kw(kw, pair)
    m1, n1 = recover_m1_n1(kw, pair)
    return {
        "p0": kw.p0,
        "c_a": kw.c_a,
        "c_b": kw.c_b,
        "r0": pair.rt.r0,
        "add": add,
        "bdd": bdd,
        "axd": axd,
        "byd": byd,
        "reconstruction_residual": kw.reconstruction_residual,
        "orthogonality_residual": kw.orthogonality_residual,
        "r0_vs_x_over_axx": abs(pair.rt.r0 - pair.x / report.axx),
        "hessian_mismatch": max(abs(add - report.add), abs(bdd - report.bdd), abs(axd - report.axd),
                                abs(byd - report.byd)),
        "m1_mismatch": float(np.max(np.abs(m1 - report.m1))),
        "n1_mismatch": float(np.max(np.abs(n1 - report.n1))),
    }
