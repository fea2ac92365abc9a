"""Finite-state markets on path trees and the perturbation functionals.

A market is stored as a non-recombining tree (one node per path prefix)
even when it is generated from a recombining lattice: optimal wealth for a
general utility depends on the path, so every downstream computation needs
the full filtration.

Leaf-indexed arrays ("path functionals") are plain float arrays ordered like
the last layer of the tree.

Perturbation convention.  The one-period return of the stock in the
delta-model is

    dS^delta = dS^0 / (1 - delta * nu * dS^0),

which is the exact discrete counterpart of shifting the market price of
risk by ``delta * nu``: to first order it adds ``delta * nu * (dS^0)**2``
(realised quadratic variation) to the drift, and its wealth processes are
exactly the 0-model wealth processes divided by
``L^delta = prod(1 - delta * nu * dS^0)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ._kernels import IMPL
from .errors import InvalidMarket, NonPositiveExponential

DEFAULT_NODE_CAP = 10**6
_INVARIANT_TOL = 1e-12

NodeFunction = Callable[[float, float], float]


@dataclass(frozen=True)
class PolyNodeFunction:
    """``const + state*s + state2*s**2 + time*t``; picklable and numba friendly."""

    const: float = 0.0
    state: float = 0.0
    state2: float = 0.0
    time: float = 0.0

    def __call__(self, t, s):
        return self.const + self.state * s + self.state2 * s * s + self.time * t

    @property
    def coefficients(self) -> np.ndarray:
        return np.array([self.const, self.state, self.state2, self.time])

    @property
    def is_zero(self) -> bool:
        return not any((self.const, self.state, self.state2, self.time))


def as_node_function(spec) -> Callable:
    """Accept a number, a ``{const, state, state2, time}`` mapping or a callable ``f(t, s)``."""
    if spec is None:
        return PolyNodeFunction()
    if isinstance(spec, (int, float)):
        return PolyNodeFunction(const=float(spec))
    if isinstance(spec, dict):
        return PolyNodeFunction(**{k: float(v) for k, v in spec.items()})
    if callable(spec):
        return spec
    raise TypeError(f"cannot interpret {spec!r} as a node function")


@dataclass(frozen=True, eq=False)
class TreeMarket:
    """Filtered one-stock market on a finite tree.

    Node arrays (length ``n_nodes``): ``state``, ``time``, ``qv``, ``lam``,
    ``nu``.  Edge arrays are stored on the child node: ``prob`` is the
    conditional transition probability and ``dM`` the martingale increment.
    """

    parent: np.ndarray
    child_ptr: np.ndarray
    layer_ptr: np.ndarray
    prob: np.ndarray
    dM: np.ndarray
    qv: np.ndarray
    lam: np.ndarray
    nu: np.ndarray
    state: np.ndarray
    time: np.ndarray
    horizon: float
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for name in ("parent", "child_ptr", "layer_ptr"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for name in ("prob", "dM", "qv", "lam", "nu", "state", "time"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        report = self.invariant_residuals()
        problems = [k for k, v in report.items() if v > _INVARIANT_TOL]
        if problems:
            raise InvalidMarket(f"market invariants violated: { {k: report[k] for k in problems} }")
        self._check_no_arbitrage()

    # ---- shape -----------------------------------------------------------
    @property
    def n_nodes(self) -> int:
        return self.parent.shape[0]

    @property
    def steps(self) -> int:
        return self.layer_ptr.shape[0] - 2

    @property
    def leaf_start(self) -> int:
        return int(self.layer_ptr[-2])

    @property
    def n_leaves(self) -> int:
        return self.n_nodes - self.leaf_start

    @property
    def n_internal(self) -> int:
        return self.leaf_start

    def n_children(self) -> np.ndarray:
        return np.diff(self.child_ptr)

    def layer(self, k: int) -> slice:
        return slice(int(self.layer_ptr[k]), int(self.layer_ptr[k + 1]))

    def depth(self) -> np.ndarray:
        return np.repeat(np.arange(self.steps + 1), np.diff(self.layer_ptr))

    def is_complete(self) -> bool:
        return bool(np.all(self.n_children()[: self.leaf_start] == 2))

    # ---- derived quantities ----------------------------------------------
    def parent_values(self, node_values: np.ndarray) -> np.ndarray:
        """Edge array holding the parent's value (entry 0 is 0)."""
        out = np.zeros(self.n_nodes)
        out[1:] = node_values[self.parent[1:]]
        return out

    def base_returns(self) -> np.ndarray:
        """Edge returns of the 0-model, ``lambda*qv + dM``."""
        if "r0" not in self._cache:
            r = self.parent_values(self.lam) * self.parent_values(self.qv) + self.dM
            r[0] = 0.0
            r.setflags(write=False)
            self._cache["r0"] = r
        return self._cache["r0"]

    def path_prob(self) -> np.ndarray:
        """Unconditional probability of every node."""
        if "pp" not in self._cache:
            edge = np.zeros(self.n_nodes)
            edge[1:] = np.log(self.prob[1:])
            pp = np.exp(self.accumulate(edge, 0.0))
            pp.setflags(write=False)
            self._cache["pp"] = pp
        return self._cache["pp"]

    def leaf_prob(self) -> np.ndarray:
        return self.path_prob()[self.leaf_start:]

    def accumulate(self, edge: np.ndarray, init: float = 0.0) -> np.ndarray:
        """Running path sums of an edge quantity (node-indexed)."""
        return IMPL.forward_accumulate(self.parent, self.layer_ptr, np.asarray(edge, dtype=np.float64), float(init))

    def cond_expect(self, leaf_values: np.ndarray, prob: np.ndarray | None = None) -> np.ndarray:
        """Node-indexed conditional expectations of a leaf functional."""
        prob = self.prob if prob is None else prob
        return IMPL.conditional_expectation(
            self.child_ptr, self.layer_ptr, np.asarray(prob, dtype=np.float64), np.asarray(leaf_values, dtype=np.float64)
        )

    def expect(self, leaf_values: np.ndarray) -> float:
        return float(np.dot(self.leaf_prob(), leaf_values))

    def ancestors_of_leaves(self) -> np.ndarray:
        """``(steps, n_leaves)`` array; row k holds the depth-k ancestor of each leaf."""
        if "anc" not in self._cache:
            anc = np.empty((self.steps + 1, self.n_leaves), dtype=np.int64)
            anc[self.steps] = np.arange(self.leaf_start, self.n_nodes)
            for k in range(self.steps - 1, -1, -1):
                anc[k] = self.parent[anc[k + 1]]
            anc.setflags(write=False)
            self._cache["anc"] = anc
        return self._cache["anc"]

    # ---- invariants ------------------------------------------------------
    def invariant_residuals(self) -> dict:
        ls = self.leaf_start
        if np.any(self.prob[1:] <= 0):
            raise InvalidMarket("transition probabilities must be positive")
        if np.any(self.n_children()[:ls] < 2):
            raise InvalidMarket("every internal node needs at least two children")
        if np.any(self.n_children()[ls:] != 0):
            raise InvalidMarket("all leaves must sit in the last layer")
        for name in ("prob", "dM", "qv", "lam", "nu"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidMarket(f"non-finite values in {name}")
        psum = np.zeros(ls)
        mart = np.zeros(ls)
        comp = np.zeros(ls)
        par = self.parent[1:]
        np.add.at(psum, par, self.prob[1:])
        np.add.at(mart, par, self.prob[1:] * self.dM[1:])
        np.add.at(comp, par, self.prob[1:] * self.dM[1:] ** 2)
        scale = max(float(np.max(self.qv[:ls], initial=0.0)), 1e-300)
        return {
            "prob_sum": float(np.max(np.abs(psum - 1.0), initial=0.0)),
            "martingale": float(np.max(np.abs(mart), initial=0.0)) / math.sqrt(scale),
            "compensator": float(np.max(np.abs(comp - self.qv[:ls]), initial=0.0)) / scale,
        }

    def _check_no_arbitrage(self):
        r = self.base_returns()
        par = self.parent[1:]
        up = np.zeros(self.leaf_start, dtype=bool)
        dn = np.zeros(self.leaf_start, dtype=bool)
        np.logical_or.at(up, par, r[1:] > 0)
        np.logical_or.at(dn, par, r[1:] < 0)
        bad = np.flatnonzero(~(up & dn))
        if bad.size:
            raise InvalidMarket(f"arbitrage at node {int(bad[0])}: returns do not take both signs")

    # ---- serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        layers = []
        for k in range(self.steps + 1):
            nodes = []
            for i in range(*self.layer(k).indices(self.n_nodes)):
                entry = {
                    "state": float(self.state[i]),
                    "time": float(self.time[i]),
                    "qv": float(self.qv[i]),
                    "lambda": float(self.lam[i]),
                    "nu": float(self.nu[i]),
                    "children": [
                        {"prob": float(self.prob[c]), "dM": float(self.dM[c])}
                        for c in range(self.child_ptr[i], self.child_ptr[i + 1])
                    ],
                }
                nodes.append(entry)
            layers.append(nodes)
        return {"format": "mprsens-tree/1", "horizon": float(self.horizon), "layers": layers}

    def to_json(self, path=None, **kw) -> str:
        text = json.dumps(self.to_dict(), **kw)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def with_nu(self, nu_spec) -> "TreeMarket":
        """Same tree, different perturbation direction."""
        f = as_node_function(nu_spec)
        nu = np.array([f(t, s) for t, s in zip(self.time, self.state)], dtype=float)
        return _replace(self, nu=nu)

    def with_lambda(self, lambda_spec) -> "TreeMarket":
        f = as_node_function(lambda_spec)
        lam = np.array([f(t, s) for t, s in zip(self.time, self.state)], dtype=float)
        return _replace(self, lam=lam)


def _replace(m: TreeMarket, **changes) -> TreeMarket:
    kw = {k: getattr(m, k) for k in ("parent", "child_ptr", "layer_ptr", "prob", "dM", "qv", "lam", "nu", "state", "time", "horizon")}
    kw.update(changes)
    return TreeMarket(**kw)


def from_dict(doc: dict) -> TreeMarket:
    """Inverse of :meth:`TreeMarket.to_dict`."""
    layers = doc["layers"]
    if not layers or len(layers[0]) != 1:
        raise InvalidMarket("first layer must contain exactly the root")
    parent, prob, dM = [-1], [1.0], [0.0]
    child_ptr = []
    qv, lam, nu, state, time = [], [], [], [], []
    layer_ptr = [0]
    idx = 0
    for k, nodes in enumerate(layers):
        nxt = len(layers[k + 1]) if k + 1 < len(layers) else 0
        n_kids = sum(len(nd.get("children", [])) for nd in nodes)
        if n_kids != nxt:
            raise InvalidMarket(f"layer {k} lists {n_kids} children but layer {k + 1} has {nxt} nodes")
        base = layer_ptr[-1] + len(nodes)
        offset = base
        for nd in nodes:
            child_ptr.append(offset)
            for ch in nd.get("children", []):
                parent.append(idx)
                prob.append(float(ch["prob"]))
                dM.append(float(ch["dM"]))
            offset += len(nd.get("children", []))
            qv.append(float(nd.get("qv", 0.0)))
            lam.append(float(nd.get("lambda", 0.0)))
            nu.append(float(nd.get("nu", 0.0)))
            state.append(float(nd.get("state", 0.0)))
            time.append(float(nd.get("time", k)))
            idx += 1
        layer_ptr.append(base)
    child_ptr.append(layer_ptr[-1])
    return TreeMarket(
        parent=np.array(parent), child_ptr=np.array(child_ptr), layer_ptr=np.array(layer_ptr),
        prob=np.array(prob), dM=np.array(dM), qv=np.array(qv), lam=np.array(lam), nu=np.array(nu),
        state=np.array(state), time=np.array(time), horizon=float(doc.get("horizon", time[-1])),
    )


def from_json(path_or_text: str) -> TreeMarket:
    text = path_or_text
    if not path_or_text.lstrip().startswith("{"):
        with open(path_or_text) as fh:
            text = fh.read()
    return from_dict(json.loads(text))


# --------------------------------------------------------------------------
# builders
# --------------------------------------------------------------------------

def build_lattice(steps: int, dt: float, moves: Sequence[tuple[float, float]], lambda_spec=0.0, nu_spec=0.0,
                  node_cap: int = DEFAULT_NODE_CAP) -> TreeMarket:
    """Expand a one-step move set ``[(prob, dM), ...]`` into a path tree.

    The node state is the running value of M, so ``lambda_spec`` and
    ``nu_spec`` see ``(t, M_t)`` exactly as on the recombining lattice.
    """
    if steps < 1:
        raise InvalidMarket("steps must be >= 1")
    if not dt > 0:
        raise InvalidMarket("dt must be positive")
    b = len(moves)
    n_nodes = sum(b**k for k in range(steps + 1))
    if n_nodes > node_cap:
        raise InvalidMarket(f"tree would have {n_nodes} nodes (cap {node_cap})")
    mp = np.array([m[0] for m in moves], dtype=float)
    md = np.array([m[1] for m in moves], dtype=float)
    qv_step = float(np.dot(mp, md * md))
    layer_sizes = [b**k for k in range(steps + 1)]
    layer_ptr = np.concatenate([[0], np.cumsum(layer_sizes)])
    parent = np.full(n_nodes, -1, dtype=np.int64)
    prob = np.ones(n_nodes)
    dM = np.zeros(n_nodes)
    state = np.zeros(n_nodes)
    time = np.zeros(n_nodes)
    for k in range(1, steps + 1):
        lo, hi = layer_ptr[k], layer_ptr[k + 1]
        plo = layer_ptr[k - 1]
        parent[lo:hi] = plo + np.repeat(np.arange(layer_sizes[k - 1]), b)
        prob[lo:hi] = np.tile(mp, layer_sizes[k - 1])
        dM[lo:hi] = np.tile(md, layer_sizes[k - 1])
        state[lo:hi] = state[parent[lo:hi]] + dM[lo:hi]
        time[lo:hi] = k * dt
    child_ptr = np.empty(n_nodes + 1, dtype=np.int64)
    n_internal = layer_ptr[steps]
    child_ptr[:n_internal] = 1 + b * np.arange(n_internal)
    child_ptr[n_internal:] = n_nodes
    qv = np.where(np.arange(n_nodes) < n_internal, qv_step, 0.0)
    lf, nf = as_node_function(lambda_spec), as_node_function(nu_spec)
    lam = _eval_node_function(lf, time, state)
    nu = _eval_node_function(nf, time, state)
    return TreeMarket(parent=parent, child_ptr=child_ptr, layer_ptr=layer_ptr, prob=prob, dM=dM, qv=qv,
                      lam=lam, nu=nu, state=state, time=time, horizon=steps * dt)


def _eval_node_function(f, time, state):
    if isinstance(f, PolyNodeFunction):
        return f(time, state).astype(float) * np.ones_like(time)
    return np.array([f(t, s) for t, s in zip(time, state)], dtype=float)


def build_binomial(steps: int, dt: float, sigma: float, lambda_spec=0.0, nu_spec=0.0,
                   node_cap: int = DEFAULT_NODE_CAP) -> TreeMarket:
    """Equiprobable ``dM = +-sigma*sqrt(dt)`` tree; ``qv = sigma**2 * dt``."""
    if not sigma > 0:
        raise InvalidMarket("sigma must be positive")
    if not dt > 0:
        raise InvalidMarket("dt must be positive")
    a = sigma * math.sqrt(dt)
    return build_lattice(steps, dt, [(0.5, a), (0.5, -a)], lambda_spec, nu_spec, node_cap)


def build_trinomial(steps: int, dt: float, sigma: float, lambda_spec=0.0, nu_spec=0.0,
                    node_cap: int = DEFAULT_NODE_CAP) -> TreeMarket:
    """Incomplete three-branch tree: ``dM in {+a, 0, -a}``, ``a = sigma*sqrt(3 dt)``, probs 1/6, 2/3, 1/6."""
    if not sigma > 0:
        raise InvalidMarket("sigma must be positive")
    if not dt > 0:
        raise InvalidMarket("dt must be positive")
    a = sigma * math.sqrt(3.0 * dt)
    return build_lattice(steps, dt, [(1 / 6, a), (2 / 3, 0.0), (1 / 6, -a)], lambda_spec, nu_spec, node_cap)


# --------------------------------------------------------------------------
# perturbation functionals
# --------------------------------------------------------------------------

def positivity_radius(m: TreeMarket) -> tuple[float, float]:
    """Open interval of delta on which every factor ``1 - delta*nu*dS^0`` is positive."""
    k = m.parent_values(m.nu)[1:] * m.base_returns()[1:]
    pos, neg = k[k > 0], k[k < 0]
    hi = float(np.min(1.0 / pos)) if pos.size else math.inf
    lo = float(np.max(1.0 / neg)) if neg.size else -math.inf
    return lo, hi


def _edge_factors(m: TreeMarket, delta: float) -> np.ndarray:
    fac = 1.0 - delta * m.parent_values(m.nu) * m.base_returns()
    fac[0] = 1.0
    bad = np.flatnonzero(fac <= 0)
    if bad.size:
        raise NonPositiveExponential(
            f"edge factor {fac[bad[0]]:.4g} <= 0 into node {int(bad[0])}; shrink delta "
            f"(admissible interval {positivity_radius(m)})"
        )
    return fac


def perturbed_returns(m: TreeMarket, delta: float) -> np.ndarray:
    """Edge returns of the delta-model (node-indexed, entry 0 unused)."""
    r0 = m.base_returns()
    if delta == 0.0:
        return np.array(r0)
    return r0 / _edge_factors(m, delta)


def compute_F_G(m: TreeMarket) -> tuple[np.ndarray, np.ndarray]:
    """Leafwise ``F = sum nu*dS^0`` and ``G = sum (nu*dS^0)**2``."""
    edge = m.parent_values(m.nu) * m.base_returns()
    F = m.accumulate(edge)[m.leaf_start:]
    G = m.accumulate(edge * edge)[m.leaf_start:]
    return F, G


def l_delta_process(m: TreeMarket, delta: float) -> np.ndarray:
    """Node values of ``L^delta``, the 0-model wealth with proportion ``-delta*nu``."""
    fac = _edge_factors(m, delta)
    return np.exp(m.accumulate(np.log(fac)))


def l_delta(m: TreeMarket, delta: float) -> np.ndarray:
    if delta == 0.0:
        return np.ones(m.n_leaves)
    return l_delta_process(m, delta)[m.leaf_start:]


def zeta(m: TreeMarket, c: float, delta: float = 0.0) -> np.ndarray:
    """Leafwise ``exp(c(|nu.S^delta_T| + [nu.S^delta]_T))``."""
    if c < 0:
        raise ValueError("c must be >= 0")
    edge = m.parent_values(m.nu) * perturbed_returns(m, delta)
    s = m.accumulate(edge)[m.leaf_start:]
    qv = m.accumulate(edge * edge)[m.leaf_start:]
    return np.exp(c * (np.abs(s) + qv))
