"""First- and second-order sensitivities of the value functions in the direction nu.

Everything lives on the leaves of the tree under the measure ``R`` with
density ``X_T Y_T / (xy)``.  Martingales of ``R`` started at zero split into

* the attainable part, terminal gains of self-financing strategies in units of
  the optimal wealth (one generator per internal node), and
* its complement, generated node by node by increments that are ``R``-centred
  and orthogonal to the stock increment (empty on binomial trees).

The quadratic problems are solved by sparse normal equations.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .market import TreeMarket, compute_F_G, l_delta, zeta
from .solver import OptimalPair, solve_unperturbed

SCHEMA_VERSION = "1.0"
PINV_RCOND = 1e-12


@dataclass(eq=False)
class AttainableSpace:
    """Generators of the attainable ``R``-martingales and of their complement.

    ``basis`` is ``(n_leaves, n_internal)``: column ``i`` is the discounted
    gain of holding one unit at node ``i`` for one period.  ``complement`` has
    one column per extra child beyond the second at each node.
    """

    basis: sp.csc_matrix
    complement: sp.csc_matrix
    weights: np.ndarray  # R weights of the leaves
    edge_gain: np.ndarray  # per non-root node: return in units of the optimal wealth

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    @property
    def complement_dim(self) -> int:
        return self.complement.shape[1]

    def gram(self, scale=None, which: str = "basis") -> sp.csc_matrix:
        """``E^R[scale * b_i * b_j]`` over the chosen generators."""
        mat = self.basis if which == "basis" else self.complement
        w = self.weights if scale is None else self.weights * scale
        return (mat.T @ sp.diags(w) @ mat).tocsc()

    def dimension_gap(self) -> int:
        """``n_leaves - 1 - dim - complement_dim``; zero when the two spaces and constants span all payoffs."""
        return self.basis.shape[0] - 1 - self.dim - self.complement_dim


def _edge_gain(pair: OptimalPair) -> np.ndarray:
    m = pair.market
    r = pair.returns
    pi = np.zeros(m.n_nodes)
    pi[: m.leaf_start] = pair.pi_hat
    g = r / (1.0 + m.parent_values(pi) * r)
    g[0] = 0.0
    return g


def build_attainable_space(pair: OptimalPair, m: TreeMarket | None = None) -> AttainableSpace:
    m = pair.market if m is None else m
    nl, ls, steps = m.n_leaves, m.leaf_start, m.steps
    anc = m.ancestors_of_leaves()
    g = _edge_gain(pair)
    rows = np.tile(np.arange(nl), steps)
    cols = anc[:steps].ravel()
    vals = g[anc[1:]].ravel()
    basis = sp.csc_matrix((vals, (rows, cols)), shape=(nl, ls))
    complement = _complement(pair, m, g, anc)
    return AttainableSpace(basis=basis, complement=complement, weights=pair.r_weights, edge_gain=g)


def _complement(pair: OptimalPair, m: TreeMarket, g: np.ndarray, anc: np.ndarray) -> sp.csc_matrix:
    nc = m.n_children()
    nl = m.n_leaves
    extra = np.maximum(nc - 2, 0)
    offs = np.concatenate([[0], np.cumsum(extra)])
    if offs[-1] == 0:
        return sp.csc_matrix((nl, 0))
    # conditional R-probabilities of each child
    xy = pair.wealth * m.cond_expect(pair.yhat_T)
    qr = np.ones(m.n_nodes)
    qr[1:] = m.prob[1:] * xy[1:] / xy[m.parent[1:]]
    width = int(extra.max())
    fvals = np.zeros((m.n_nodes, width))
    for i in np.flatnonzero(extra):
        ch = slice(m.child_ptr[i], m.child_ptr[i + 1])
        K = np.vstack([qr[ch], qr[ch] * g[ch]])
        ns = sla.null_space(K)
        # orthonormal under the conditional R-probabilities
        gram = ns.T @ (qr[ch][:, None] * ns)
        ns = ns @ np.linalg.inv(np.linalg.cholesky(gram)).T
        fvals[ch, : ns.shape[1]] = ns
    rows, cols, vals = [], [], []
    for k in range(m.steps):
        node = anc[k]
        child = anc[k + 1]
        for j in range(width):
            sel = extra[node] > j
            rows.append(np.flatnonzero(sel))
            cols.append(offs[node[sel]] + j)
            vals.append(fvals[child[sel], j])
    return sp.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nl, int(offs[-1]))
    )


def _normal_solve(mat: sp.csc_matrix, w: np.ndarray, scale: np.ndarray, rhs_leaf: np.ndarray):
    """Minimise ``E^R[scale * h.b^2] - 2 E^R[rhs_leaf * h.b]``; returns terminal value and residual."""
    nl, k = mat.shape
    if k == 0:
        return np.zeros(nl), np.zeros(0), 0.0
    Q = (mat.T @ sp.diags(w * scale) @ mat).tocsc()
    rhs = mat.T @ (w * rhs_leaf)
    norm = max(float(np.max(np.abs(rhs))), 1e-300)
    if not np.any(rhs):
        return np.zeros(nl), np.zeros(k), 0.0
    h = spla.spsolve(Q, rhs) if k > 1 else np.atleast_1d(rhs / Q.toarray()[0])
    res = float(np.max(np.abs(Q @ h - rhs))) / norm if np.all(np.isfinite(h)) else math.inf
    if res > 1e-10:
        Qd = Q.toarray()
        h = np.linalg.pinv(Qd, rcond=PINV_RCOND, hermitian=True) @ rhs
        res = float(np.max(np.abs(Qd @ h - rhs))) / norm
    return mat @ h, h, res


def solve_axx(pair: OptimalPair, space: AttainableSpace):
    """``min E^R[A(X_T)(1 + M_T)^2]`` over attainable ``M``; returns ``(axx, m0, coef, residual)``."""
    A = pair.util.rra(pair.xhat_T)
    m0, h, res = _normal_solve(space.basis, space.weights, A, -A)
    return pair.r_expect(A * (1.0 + m0) ** 2), m0, h, res


def solve_add(pair: OptimalPair, space: AttainableSpace, F, G):
    """``min E^R[A(M_T + xF)^2 - 2xF M_T - x^2(F^2 + G)]``."""
    x = pair.x
    A = pair.util.rra(pair.xhat_T)
    m1, h, res = _normal_solve(space.basis, space.weights, A, -(A - 1.0) * x * F)
    val = pair.r_expect(A * (m1 + x * F) ** 2 - 2 * x * F * m1 - x * x * (F * F + G))
    return val, m1, h, res


def solve_byy(pair: OptimalPair, space: AttainableSpace):
    """``min E^R[B(Y_T)(1 + N_T)^2]`` over the complement."""
    B = pair.util.rrt(pair.yhat_T)
    n0, h, res = _normal_solve(space.complement, space.weights, B, -B)
    return pair.r_expect(B * (1.0 + n0) ** 2), n0, h, res


def solve_bdd(pair: OptimalPair, space: AttainableSpace, F, G):
    """``min E^R[B(N_T - yF)^2 + 2yF N_T - y^2(F^2 - G)]`` over the complement."""
    y = pair.y
    B = pair.util.rrt(pair.yhat_T)
    n1, h, res = _normal_solve(space.complement, space.weights, B, (B - 1.0) * y * F)
    val = pair.r_expect(B * (n1 - y * F) ** 2 + 2 * y * F * n1 - y * y * (F * F - G))
    return val, n1, h, res


def compute_axd(pair: OptimalPair, m0, m1, F) -> float:
    x = pair.x
    A = pair.util.rra(pair.xhat_T)
    return pair.r_expect(A * (1.0 + m0) * (x * F + m1) - x * F * (1.0 + m0))


def compute_byd(pair: OptimalPair, n0, n1, F) -> float:
    y = pair.y
    B = pair.util.rrt(pair.yhat_T)
    return pair.r_expect(B * (1.0 + n0) * (n1 - y * F) + y * F * (1.0 + n0))


def first_order(pair: OptimalPair, F) -> float:
    """``u_delta(x, 0) = v_delta(y, 0) = xy E^R[F]``."""
    return pair.x * pair.y * pair.r_expect(F)


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

@dataclass(eq=False)
class SensitivityReport:
    x: float
    y: float
    u0: float
    v0: float
    u_delta: float
    axx: float
    axd: float
    add: float
    byy: float
    byd: float
    bdd: float
    m0: np.ndarray
    m1: np.ndarray
    n0: np.ndarray
    n1: np.ndarray
    coef_m0: np.ndarray
    coef_m1: np.ndarray
    F: np.ndarray
    G: np.ndarray
    residuals: dict = field(default_factory=dict)
    kw: dict | None = None

    @property
    def grad_u(self) -> np.ndarray:
        return np.array([self.y, self.u_delta])

    @property
    def grad_v(self) -> np.ndarray:
        return np.array([-self.x, self.u_delta])

    @property
    def Hu(self) -> np.ndarray:
        return -(self.y / self.x) * np.array([[self.axx, self.axd], [self.axd, self.add]])

    @property
    def Hv(self) -> np.ndarray:
        return (self.x / self.y) * np.array([[self.byy, self.byd], [self.byd, self.bdd]])

    @property
    def coefficients(self) -> dict:
        return {k: getattr(self, k) for k in ("axx", "axd", "add", "byy", "byd", "bdd")}

    def to_dict(self, config_hash: str | None = None) -> dict:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "config_hash": config_hash,
            "x": self.x,
            "y": self.y,
            "u0": self.u0,
            "v0": self.v0,
            "grad_u": self.grad_u.tolist(),
            "grad_v": self.grad_v.tolist(),
            "hessian_u": self.Hu.tolist(),
            "hessian_v": self.Hv.tolist(),
            "coefficients": self.coefficients,
            "residuals": {k: _jsonable(v) for k, v in self.residuals.items()},
        }
        if self.kw is not None:
            doc["kw"] = {k: _jsonable(v) for k, v in self.kw.items()}
        return doc

    def to_json(self, config_hash: str | None = None, **kw) -> str:
        return json.dumps(self.to_dict(config_hash), **kw)


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    return v


def analyze(m: TreeMarket, util, x: float, pair: OptimalPair | None = None, with_kw: bool = True):
    """Solve the 0-model and compute every first- and second-order quantity.

    Returns ``(pair, space, report)``.
    """
    pair = solve_unperturbed(m, util, x) if pair is None else pair
    space = build_attainable_space(pair, m)
    F, G = compute_F_G(m)
    axx, m0, h0, r_axx = solve_axx(pair, space)
    add, m1, h1, r_add = solve_add(pair, space, F, G)
    byy, n0, _, r_byy = solve_byy(pair, space)
    bdd, n1, _, r_bdd = solve_bdd(pair, space, F, G)
    report = SensitivityReport(
        x=pair.x, y=pair.y, u0=pair.u0, v0=pair.v0, u_delta=first_order(pair, F),
        axx=axx, axd=compute_axd(pair, m0, m1, F), add=add,
        byy=byy, byd=compute_byd(pair, n0, n1, F), bdd=bdd,
        m0=m0, m1=m1, n0=n0, n1=n1, coef_m0=h0, coef_m1=h1, F=F, G=G,
    )
    report.residuals.update(
        normal_axx=r_axx, normal_add=r_add, normal_byy=r_byy, normal_bdd=r_bdd,
        dimension_gap=space.dimension_gap(), orthogonality=orthogonality_residual(space),
        duality_gap=abs(pair.u0 - pair.v0 - pair.x * pair.y), foc=pair.foc_residual,
    )
    report.residuals.update(verify_identities(report, pair))
    if with_kw and pair.rt_exists:
        from .kw import kw_report

        report.kw = kw_report(pair, report)
    return pair, space, report


def orthogonality_residual(space: AttainableSpace) -> float:
    if space.complement_dim == 0:
        return 0.0
    cross = space.basis.T @ sp.diags(space.weights) @ space.complement
    return float(np.max(np.abs(cross.toarray()))) if cross.nnz else 0.0


# --------------------------------------------------------------------------
# identities
# --------------------------------------------------------------------------

def one_step_martingale_residual(m: TreeMarket, node_values: np.ndarray) -> float:
    """Max over internal nodes of ``|Z_n - sum_c q_c Z_c|``, relative to ``max |Z|``."""
    z = np.asarray(node_values, dtype=float)
    nxt = np.zeros(m.leaf_start)
    np.add.at(nxt, m.parent[1:], m.prob[1:] * z[1:])
    scale = max(float(np.max(np.abs(z))), 1e-300)
    return float(np.max(np.abs(nxt - z[: m.leaf_start]))) / scale


def verify_identities(report: SensitivityReport, pair: OptimalPair) -> dict:
    m = pair.market
    x, y = report.x, report.y
    Ka = np.array([[report.axx, 0.0], [report.axd, -x / y]])
    Kb = np.array([[report.byy, 0.0], [report.byd, -y / x]])
    prod = Ka @ Kb
    gap = (y / x) * report.add + (x / y) * report.bdd - report.axd * report.byd

    X, Y, F = pair.xhat_T, pair.yhat_T, report.F
    util = pair.util
    lhs = util.d2u(X) * X * np.vstack([report.m0 + 1.0, report.m1 + x * F])
    rhs = -Ka @ (Y * np.vstack([report.n0 + 1.0, report.n1 - y * F]))
    r_opt = float(np.max(np.abs(lhs - rhs)) / np.max(np.abs(lhs)))
    lhs_d = util.d2v(Y) * Y * np.vstack([1.0 + report.n0, -y * F + report.n1])
    rhs_d = Kb @ (X * np.vstack([1.0 + report.m0, x * F + report.m1]))
    r_opt_dual = float(np.max(np.abs(lhs_d - rhs_d)) / np.max(np.abs(lhs_d)))
    pointwise = float(np.max(np.abs(util.rra(X) * (1 + report.m0) - report.axx * (1 + report.n0))))

    xproc = pair.wealth
    yproc = pair.yhat_process
    mprocs = [np.ones(m.n_nodes), pair.r_cond_expect(report.m0), pair.r_cond_expect(report.m1)]
    nprocs = [np.ones(m.n_nodes), pair.r_cond_expect(report.n0), pair.r_cond_expect(report.n1)]
    mart = [one_step_martingale_residual(m, xproc * a * yproc * b) for a in mprocs for b in nprocs]
    return {
        "identity_matrix": float(np.max(np.abs(prod - np.eye(2)))),
        "key_gap": float(abs(gap)),
        "pointwise_optimizer": r_opt,
        "pointwise_optimizer_dual": r_opt_dual,
        "pointwise_axx": pointwise,
        "axx_byy": float(abs(report.axx * report.byy - 1.0)),
        "product_martingales": mart,
        "product_martingale_max": float(max(mart)),
    }


# --------------------------------------------------------------------------
# predictions
# --------------------------------------------------------------------------

def predict_expansion(report: SensitivityReport, u0: float, v0: float, dx: float, delta: float, dy: float | None = None):
    """Second-order Taylor predictions ``(u(x+dx, delta), v(y+dy, delta))``; ``dy`` defaults to ``dx``."""
    dy = dx if dy is None else dy
    hu = np.array([dx, delta])
    hv = np.array([dy, delta])
    u_pred = u0 + hu @ report.grad_u + 0.5 * hu @ report.Hu @ hu
    v_pred = v0 + hv @ report.grad_v + 0.5 * hv @ report.Hv @ hv
    return float(u_pred), float(v_pred)


@dataclass(eq=False)
class OptimizerPrediction:
    multiplicative: np.ndarray
    additive: np.ndarray
    dual_multiplicative: np.ndarray
    dual_additive: np.ndarray


def optimizer_derivatives(pair: OptimalPair, report: SensitivityReport) -> dict:
    """Terminal values of ``X'``, ``X^d``, ``Y'`` and ``Y^d``."""
    x, y = pair.x, pair.y
    X, Y, F = pair.xhat_T, pair.yhat_T, report.F
    return {
        "X_prime": X / x * (1.0 + report.m0),
        "X_d": X / x * (report.m1 + x * F),
        "Y_prime": Y / y * (1.0 + report.n0),
        "Y_d": Y / y * (report.n1 - y * F),
    }


def predict_optimizer(pair: OptimalPair, report: SensitivityReport, dx: float, delta: float,
                      Ldelta=None, dy: float | None = None) -> OptimizerPrediction:
    """First-order predictions of ``X_T(x+dx, delta)`` and ``Y_T(y+dy, delta)``."""
    dy = dx if dy is None else dy
    x, y = pair.x, pair.y
    L = l_delta(pair.market, delta) if Ldelta is None else np.asarray(Ldelta)
    X, Y = pair.xhat_T, pair.yhat_T
    d = optimizer_derivatives(pair, report)
    return OptimizerPrediction(
        multiplicative=X / x * (x + dx * (1.0 + report.m0) + delta * report.m1) / L,
        additive=X + dx * d["X_prime"] + delta * d["X_d"],
        dual_multiplicative=Y / y * (y + dy * (1.0 + report.n0) + delta * report.n1) * L,
        dual_additive=Y + dy * d["Y_prime"] + delta * d["Y_d"],
    )


def integrability_probe(m: TreeMarket, pair: OptimalPair, c_grid) -> list[dict]:
    """``E^R[zeta(c, 0)]`` for each ``c``; always finite on a tree."""
    out = []
    for c in c_grid:
        val = pair.r_expect(zeta(m, float(c), 0.0))
        out.append({"c": float(c), "moment": val, "finite": bool(math.isfinite(val))})
    return out


def config_hash(cfg) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]
