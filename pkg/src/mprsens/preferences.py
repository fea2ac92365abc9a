"""Utility functions with bounded relative risk aversion."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

Fn = Callable[[np.ndarray], np.ndarray]

_BOUND_SLACK = 1e-10


@dataclass(frozen=True)
class UtilitySpec:
    """A utility ``U``, its conjugate ``V(y) = sup_x (U(x) - xy)`` and RRA bounds ``c1 <= A <= c2``.

    All callables are vectorised over numpy arrays.
    """

    u: Fn
    du: Fn
    d2u: Fn
    v: Fn
    dv: Fn
    d2v: Fn
    c1: float
    c2: float
    kind: str = "custom"
    params: dict = field(default_factory=dict)

    def rra(self, x):
        """Relative risk aversion ``A(x) = -x U''(x) / U'(x)``."""
        x = np.asarray(x, dtype=float)
        return -x * self.d2u(x) / self.du(x)

    def rrt(self, y):
        """Relative risk tolerance ``B(y) = -y V''(y) / V'(y)``."""
        y = np.asarray(y, dtype=float)
        return -y * self.d2v(y) / self.dv(y)

    def risk_tolerance(self, x):
        """Absolute risk tolerance ``-U'(x)/U''(x)``."""
        x = np.asarray(x, dtype=float)
        return -self.du(x) / self.d2u(x)

    def to_config(self) -> dict:
        return {"kind": self.kind, **self.params}


def power_utility(p: float) -> UtilitySpec:
    """``U(x) = x**p / p`` for ``p < 1, p != 0``; constant RRA ``1 - p``."""
    p = float(p)
    if not p < 1 or p == 0:
        raise ValueError(f"power utility needs p < 1 and p != 0, got {p}")
    q = p / (1.0 - p)
    return UtilitySpec(
        u=lambda x: np.power(x, p) / p,
        du=lambda x: np.power(x, p - 1.0),
        d2u=lambda x: (p - 1.0) * np.power(x, p - 2.0),
        v=lambda y: np.power(y, -q) / q,
        dv=lambda y: -np.power(y, -q - 1.0),
        d2v=lambda y: (q + 1.0) * np.power(y, -q - 2.0),
        c1=1.0 - p,
        c2=1.0 - p,
        kind="power",
        params={"p": p},
    )


def log_utility() -> UtilitySpec:
    return UtilitySpec(
        u=np.log,
        du=lambda x: 1.0 / np.asarray(x, dtype=float),
        d2u=lambda x: -1.0 / np.square(x),
        v=lambda y: -np.log(y) - 1.0,
        dv=lambda y: -1.0 / np.asarray(y, dtype=float),
        d2v=lambda y: 1.0 / np.square(y),
        c1=1.0,
        c2=1.0,
        kind="log",
    )


def inverse_marginal(du: Fn, d2u: Fn, y, c1: float, c2: float, max_iter: int = 200) -> np.ndarray:
    """Solve ``U'(x) = y`` for ``x > 0``.

    Newton on ``log x``, where the map ``log x -> log U'(x)`` has slope
    ``-A(x)`` in ``[-c2, -c1]``; a bisection bracket derived from that
    bound keeps every iterate safe.
    """
    ly = np.log(np.asarray(y, dtype=float))
    f0 = np.log(du(np.ones_like(ly))) - ly
    half = np.abs(f0) / c1 + 1.0
    lo, hi = -half, half
    z = np.zeros_like(ly)
    for _ in range(max_iter):
        x = np.exp(z)
        f = np.log(du(x)) - ly
        slope = x * d2u(x) / du(x)
        # f is decreasing in z
        lo = np.where(f > 0, z, lo)
        hi = np.where(f <= 0, z, hi)
        step = -f / slope
        z_new = z + step
        outside = (z_new <= lo) | (z_new >= hi)
        z_new = np.where(outside, 0.5 * (lo + hi), z_new)
        done = np.all(np.abs(z_new - z) <= 4e-16 * np.maximum(1.0, np.abs(z)))
        z = z_new
        if done:
            break
    return np.exp(z)


def _numeric_conjugate(u: Fn, du: Fn, d2u: Fn, c1: float, c2: float):
    inv = lambda y: inverse_marginal(du, d2u, y, c1, c2)

    def v(y):
        x = inv(y)
        return u(x) - x * np.asarray(y, dtype=float)

    def dv(y):
        return -inv(y)

    def d2v(y):
        return -1.0 / d2u(inv(y))

    return v, dv, d2v


def mixed_power_utility(powers: Sequence[float], weights: Sequence[float] | None = None) -> UtilitySpec:
    """``U(x) = sum_i w_i x**p_i / p_i``; RRA lies between ``min(1-p_i)`` and ``max(1-p_i)``."""
    ps = np.array([float(p) for p in powers])
    ws = np.ones_like(ps) if weights is None else np.array([float(w) for w in weights])
    if np.any(ps >= 1) or np.any(ps == 0) or np.any(ws <= 0):
        raise ValueError("mixed power utility needs p_i < 1, p_i != 0 and positive weights")

    def u(x):
        x = np.asarray(x, dtype=float)
        return sum(w * np.power(x, p) / p for p, w in zip(ps, ws))

    def du(x):
        x = np.asarray(x, dtype=float)
        return sum(w * np.power(x, p - 1.0) for p, w in zip(ps, ws))

    def d2u(x):
        x = np.asarray(x, dtype=float)
        return sum(w * (p - 1.0) * np.power(x, p - 2.0) for p, w in zip(ps, ws))

    c1, c2 = float(np.min(1 - ps)), float(np.max(1 - ps))
    v, dv, d2v = _numeric_conjugate(u, du, d2u, c1, c2)
    return UtilitySpec(u, du, d2u, v, dv, d2v, c1, c2, kind="mixed_power",
                       params={"powers": ps.tolist(), "weights": ws.tolist()})


def custom_utility(u: Fn, du: Fn, d2u: Fn, c1: float, c2: float, grid=None) -> UtilitySpec:
    """Wrap user callables; the declared RRA bounds are checked on ``grid``."""
    if not 0 < c1 <= c2:
        raise ValueError("need 0 < c1 <= c2")
    grid = np.logspace(-3, 3, 200) if grid is None else np.asarray(grid, dtype=float)
    a = -grid * d2u(grid) / du(grid)
    if np.any(a < c1 * (1 - _BOUND_SLACK)) or np.any(a > c2 * (1 + _BOUND_SLACK)):
        raise ValueError(f"declared bounds [{c1}, {c2}] violated: A ranges over [{a.min()}, {a.max()}]")
    v, dv, d2v = _numeric_conjugate(u, du, d2u, c1, c2)
    return UtilitySpec(u, du, d2u, v, dv, d2v, float(c1), float(c2), kind="custom")


def from_config(cfg: dict) -> UtilitySpec:
    kind = cfg.get("kind", "power")
    if kind == "power":
        return power_utility(cfg["p"])
    if kind == "log":
        return log_utility()
    if kind == "mixed_power":
        return mixed_power_utility(cfg["powers"], cfg.get("weights"))
    raise ValueError(f"unknown utility kind {kind!r}")


# --------------------------------------------------------------------------
# checks
# --------------------------------------------------------------------------

def check_growth_inequalities(util: UtilitySpec, grid) -> dict:
    """Check ``U'(zx) <= (z**-c2 + 1) U'(x)`` and ``-V'(zx) <= (z**(-1/c1) + 1)(-V'(x))``.

    ``grid`` is an iterable of ``(z, x)`` pairs.  Report only, never raises.
    """
    zx = np.asarray(list(grid), dtype=float).reshape(-1, 2)
    z, x = zx[:, 0], zx[:, 1]
    lhs_u = util.du(z * x)
    rhs_u = (np.power(z, -util.c2) + 1.0) * util.du(x)
    lhs_v = -util.dv(z * x)
    rhs_v = (np.power(z, -1.0 / util.c1) + 1.0) * (-util.dv(x))
    violations = []
    for which, lhs, rhs in (("primal", lhs_u, rhs_u), ("dual", lhs_v, rhs_v)):
        bad = np.flatnonzero(lhs > rhs * (1.0 + 1e-12))
        violations += [
            {"which": which, "z": float(z[i]), "x": float(x[i]), "lhs": float(lhs[i]), "rhs": float(rhs[i])}
            for i in bad
        ]
    return {"n_checked": int(2 * len(z)), "violations": violations}


def log_grid_pairs(n: int = 50, lo: float = 1e-3, hi: float = 1e3):
    pts = np.logspace(np.log10(lo), np.log10(hi), n)
    return [(z, x) for z in pts for x in pts]


def verify_utility(util: UtilitySpec, grid=None) -> dict:
    """Residuals of the structural invariants of ``util`` on a log grid."""
    x = np.logspace(-3, 3, 61) if grid is None else np.asarray(grid, dtype=float)
    du, d2u = util.du(x), util.d2u(x)
    a = util.rra(x)
    y = du
    roundtrip = np.max(np.abs(util.dv(y) + x) / x)
    ba = np.max(np.abs(util.rrt(y) * a - 1.0))
    h = 1e-5
    fd_u = (util.u(x * (1 + h)) - util.u(x * (1 - h))) / (2 * h * x)
    fd_v = (util.v(y * (1 + h)) - util.v(y * (1 - h))) / (2 * h * y)
    fd_du = (util.du(x * (1 + h)) - util.du(x * (1 - h))) / (2 * h * x)
    fd_dv = (util.dv(y * (1 + h)) - util.dv(y * (1 - h))) / (2 * h * y)
    return {
        "increasing": bool(np.all(du > 0)),
        "concave": bool(np.all(d2u < 0)),
        "rra_min": float(a.min()),
        "rra_max": float(a.max()),
        "bounds_ok": bool(a.min() >= util.c1 * (1 - _BOUND_SLACK) and a.max() <= util.c2 * (1 + _BOUND_SLACK)),
        "conjugacy_roundtrip": float(roundtrip),
        "rrt_times_rra": float(ba),
        "fd_du": float(np.max(np.abs(fd_u - du) / np.abs(du))),
        "fd_d2u": float(np.max(np.abs(fd_du - d2u) / np.abs(d2u))),
        "fd_dv": float(np.max(np.abs(fd_v - util.dv(y)) / np.abs(util.dv(y)))),
        "fd_d2v": float(np.max(np.abs(fd_dv - util.d2v(y)) / np.abs(util.d2v(y)))),
    }
