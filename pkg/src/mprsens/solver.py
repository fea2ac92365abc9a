"""Exact primal/dual solution of the utility maximisation problem on a tree.

The primal problem is concave in the vector of amounts ``H_n`` invested at
the internal nodes.  Each Newton step maximises the second-order model of
``E[U(X_T)]``; because the model is a separable quadratic of terminal wealth
gains, the step is computed exactly by one backward sweep (quadratic value
function per node) and one forward sweep, in O(nodes).  A backtracking line
search keeps wealth positive and the objective increasing.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from ._kernels import IMPL
from .errors import NonConvergence, RiskToleranceMissing, Unbounded
from .market import TreeMarket, perturbed_returns
from .preferences import UtilitySpec

FOC_TOL = 1e-12
REPLICATION_TOL = 1e-10
_MAX_NEWTON = 100


@dataclass(frozen=True, eq=False)
class RiskTolerance:
    exists: bool
    process: np.ndarray  # node values of R(x, 0)
    r0: float
    proportion: np.ndarray  # proportion of R invested at each internal node
    residual: float


@dataclass(frozen=True, eq=False)
class OptimalPair:
    """Solution of the primal and dual problems for one ``(x, delta)``."""

    market: TreeMarket
    util: UtilitySpec
    x: float
    delta: float
    returns: np.ndarray  # edge returns of the delta-model
    wealth: np.ndarray  # node values of the optimal wealth
    amounts: np.ndarray  # money in the stock at each internal node
    pi_hat: np.ndarray  # proportions at internal nodes
    xhat_T: np.ndarray
    yhat_T: np.ndarray
    yhat_process: np.ndarray
    y: float
    u0: float
    v0: float
    r_weights: np.ndarray
    foc_residual: float
    iterations: int
    rt: RiskTolerance | None = None

    @property
    def leaf_prob(self) -> np.ndarray:
        return self.market.leaf_prob()

    def r_expect(self, f) -> float:
        """Expectation under the measure with density ``X_T Y_T / (xy)``."""
        return float(np.dot(self.r_weights, f))

    def r_cond_expect(self, f) -> np.ndarray:
        """Node values of ``E^R[f | node]``."""
        m = self.market
        xy = self.xhat_T * self.yhat_T
        return m.cond_expect(xy * f) / m.cond_expect(xy)

    @property
    def rt_exists(self) -> bool:
        return self.rt is not None and self.rt.exists

    @property
    def rtilde_weights(self) -> np.ndarray:
        return measure_r_tilde(self)


def _wealth(m: TreeMarket, x: float, amounts: np.ndarray, r: np.ndarray) -> np.ndarray:
    return m.accumulate(m.parent_values(amounts) * r, x)


def _foc(m: TreeMarket, r: np.ndarray, y_leaf: np.ndarray) -> float:
    yproc = m.cond_expect(y_leaf)
    num, scale = IMPL.foc_terms(m.child_ptr, m.layer_ptr, m.prob, r, yproc)
    return float(np.max(np.abs(num) / scale))


def solve(m: TreeMarket, util: UtilitySpec, x: float, delta: float = 0.0, tol: float = FOC_TOL) -> OptimalPair:
    """Maximise ``E[U(X_T)]`` over wealth processes of the delta-model started at ``x``."""
    if not x > 0:
        raise ValueError("initial wealth must be positive")
    r = perturbed_returns(m, delta)
    ls = m.leaf_start
    p_leaf = m.leaf_prob()
    amounts = np.zeros(m.n_nodes)
    wealth = _wealth(m, x, amounts, r)
    obj = float(np.dot(p_leaf, util.u(wealth[ls:])))
    res = math.inf
    it = 0
    for it in range(1, _MAX_NEWTON + 1):
        leaf = wealth[ls:]
        up, upp = util.du(leaf), util.d2u(leaf)
        res = _foc(m, r, up)
        if res <= 1e-14:
            break
        a, b = IMPL.newton_coefficients(m.child_ptr, m.layer_ptr, m.prob, r, up, upp)
        step_dir = IMPL.newton_forward(m.parent, m.child_ptr, m.layer_ptr, r, a, b)
        if not np.all(np.isfinite(step_dir)):
            raise NonConvergence("Newton direction is not finite")
        step = 1.0
        for _ in range(80):
            cand = amounts + step * step_dir
            w_c = _wealth(m, x, cand, r)
            if np.all(w_c[ls:] > 0):
                obj_c = float(np.dot(p_leaf, util.u(w_c[ls:])))
                if obj_c >= obj - 1e-15 * max(1.0, abs(obj)):
                    break
            step *= 0.5
        else:
            break  # no further progress possible in floating point
        amounts, wealth, obj = cand, w_c, obj_c
        if np.max(np.abs(amounts)) > 1e12 * x:
            raise Unbounded("optimal amounts diverge; the tree admits arbitrage-like gains")
    leaf = wealth[ls:]
    yhat = util.du(leaf)
    res = _foc(m, r, yhat)
    if res > tol:
        raise NonConvergence(f"first-order condition residual {res:.3g} after {it} iterations")
    y = float(np.dot(p_leaf, leaf * yhat)) / x
    internal = wealth[:ls]
    return OptimalPair(
        market=m, util=util, x=float(x), delta=float(delta), returns=r, wealth=wealth,
        amounts=amounts[:ls].copy(), pi_hat=amounts[:ls] / internal, xhat_T=leaf.copy(), yhat_T=yhat,
        yhat_process=m.cond_expect(yhat), y=y, u0=obj, v0=float(np.dot(p_leaf, util.v(yhat))),
        r_weights=p_leaf * leaf * yhat / (x * y), foc_residual=res, iterations=it,
    )


def solve_unperturbed(m: TreeMarket, util: UtilitySpec, x: float) -> OptimalPair:
    """Solve the 0-model and attach the risk-tolerance process."""
    pair = solve(m, util, x, 0.0)
    from dataclasses import replace

    return replace(pair, rt=risk_tolerance(pair))


def value(m: TreeMarket, util: UtilitySpec, x: float, delta: float = 0.0) -> float:
    return solve(m, util, x, delta).u0


# --------------------------------------------------------------------------
# dual side
# --------------------------------------------------------------------------

def deflator_residual(pair: OptimalPair) -> float:
    """Max relative violation of ``E_n[Y_child * dS] = 0`` (so ``XY`` is a martingale for every wealth X)."""
    if np.any(pair.yhat_process <= 0):
        return math.inf
    return _foc(pair.market, pair.returns, pair.yhat_T)


def state_price_density(m: TreeMarket, delta: float = 0.0) -> np.ndarray:
    """Leafwise unique martingale deflator with ``Z_0 = 1`` (binomial trees only)."""
    if not m.is_complete():
        raise ValueError("the deflator is unique only on binomial trees")
    r = perturbed_returns(m, delta)
    c = m.child_ptr[: m.leaf_start]
    d1, d2 = r[c], r[c + 1]
    q1, q2 = m.prob[c], m.prob[c + 1]
    qs1 = -d2 / (d1 - d2)
    edge = np.zeros(m.n_nodes)
    edge[c] = np.log(qs1 / q1)
    edge[c + 1] = np.log((1.0 - qs1) / q2)
    return np.exp(m.accumulate(edge))[m.leaf_start:]


def marginal_value(m: TreeMarket, util: UtilitySpec, x: float, delta: float = 0.0) -> float:
    return solve(m, util, x, delta).y


def wealth_for_marginal(m: TreeMarket, util: UtilitySpec, y: float, delta: float = 0.0) -> float:
    """Initial wealth ``x`` with ``u_x(x, delta) = y``."""
    f = lambda lx: math.log(marginal_value(m, util, math.exp(lx), delta)) - math.log(y)
    lo, hi = -1.0, 1.0
    while f(lo) < 0:
        lo -= 2.0
    while f(hi) > 0:
        hi += 2.0
    return math.exp(optimize.brentq(f, lo, hi, xtol=1e-15, rtol=1e-15))


def dual_value(m: TreeMarket, util: UtilitySpec, y: float, delta: float = 0.0, method: str = "auto") -> float:
    """``v(y, delta)``.

    ``method="deflator"`` evaluates ``E[V(y Z_T)]`` with the unique deflator
    (binomial trees).  ``method="primal"`` finds the wealth with marginal
    value ``y`` and uses the optimiser ``U'(X_T)``.
    """
    if method == "auto":
        method = "deflator" if m.is_complete() else "primal"
    if method == "deflator":
        z = state_price_density(m, delta)
        return m.expect(util.v(y * z))
    x = wealth_for_marginal(m, util, y, delta)
    pair = solve(m, util, x, delta)
    return pair.v0


def dual_optimizer(m: TreeMarket, util: UtilitySpec, y: float, delta: float = 0.0) -> np.ndarray:
    x = wealth_for_marginal(m, util, y, delta)
    return solve(m, util, x, delta).yhat_T


# --------------------------------------------------------------------------
# risk tolerance
# --------------------------------------------------------------------------

def risk_tolerance(pair: OptimalPair) -> RiskTolerance:
    """Try to replicate ``-U'(X_T)/U''(X_T)`` with a self-financing wealth process."""
    m = pair.market
    ls = m.leaf_start
    target = pair.util.risk_tolerance(pair.xhat_T)
    proc = m.cond_expect(pair.yhat_T * target) / pair.yhat_process
    r = pair.returns
    par = m.parent[1:]
    jump = proc[1:] - proc[par]
    d = r[1:]
    q = m.prob[1:]
    num = np.zeros(ls)
    den = np.zeros(ls)
    np.add.at(num, par, q * jump * d)
    np.add.at(den, par, q * d * d)
    h = num / den
    resid = np.abs(jump - h[par] * d)
    residual = float(np.max(resid) / np.max(np.abs(proc)))
    exists = residual <= REPLICATION_TOL
    return RiskTolerance(exists=exists, process=proc, r0=float(proc[0]), proportion=h / proc[:ls], residual=residual)


def measure_r_tilde(pair: OptimalPair) -> np.ndarray:
    """Leaf weights of the measure with density ``R_T Y_T / (R_0 y)``."""
    rt = pair.rt if pair.rt is not None else risk_tolerance(pair)
    if not rt.exists:
        raise RiskToleranceMissing(f"risk-tolerance wealth process not replicable (residual {rt.residual:.3g})")
    m = pair.market
    return m.leaf_prob() * rt.process[m.leaf_start:] * pair.yhat_T / (rt.r0 * pair.y)
