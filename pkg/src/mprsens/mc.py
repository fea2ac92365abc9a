"""Monte Carlo backend for the continuous Black-Scholes-type model ``M = sigma B``.

Randomness comes from counter-based Philox streams: chunk ``k`` of stream
``stream_id`` under ``seed`` always draws the same normals, whatever the
thread count.  Per-chunk sums are combined in chunk order, so estimates are
bit-reproducible.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ._kernels import IMPL
from .market import PolyNodeFunction, as_node_function, build_binomial
from .preferences import power_utility
from .solver import solve

DEFAULT_CHUNK = 16384


@dataclass(frozen=True)
class PathEnsemble:
    n_paths: int
    n_steps: int = 256
    T: float = 1.0
    seed: int = 0
    stream_id: int = 0
    chunk_size: int = DEFAULT_CHUNK
    antithetic: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.n_paths < 1 or self.n_steps < 1 or not self.T > 0:
            raise ValueError("n_paths, n_steps and T must be positive")
        if self.antithetic and (self.n_paths % 2 or self.chunk_size % 2):
            raise ValueError("antithetic sampling needs even n_paths and chunk_size")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def n_chunks(self) -> int:
        return -(-self.n_paths // self.chunk_size)

    def chunk_rows(self, k: int) -> int:
        return min(self.chunk_size, self.n_paths - k * self.chunk_size)

    def increments(self, k: int) -> np.ndarray:
        """Brownian increments of chunk ``k``, shape ``(rows, n_steps)``."""
        rows = self.chunk_rows(k)
        bitgen = np.random.Philox(key=np.array([self.seed, self.stream_id], dtype=np.uint64),
                                  counter=np.array([0, 0, k, 0], dtype=np.uint64))
        rng = np.random.Generator(bitgen)
        sd = math.sqrt(self.dt)
        if self.antithetic:
            half = rng.standard_normal((rows // 2, self.n_steps)) * sd
            return np.concatenate([half, -half])
        return rng.standard_normal((rows, self.n_steps)) * sd

    def map_chunks(self, fn):
        """``[fn(increments(k)) for k]`` in chunk order, optionally on a thread pool."""
        work = lambda k: fn(self.increments(k))
        if self.threads > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                return list(pool.map(work, range(self.n_chunks)))
        return [work(k) for k in range(self.n_chunks)]

    def increment_check(self, z_max: float = 5.0) -> dict:
        """Per-step sample mean and variance against ``(0, dt)`` in standard errors."""
        parts = self.map_chunks(lambda dB: (dB.sum(axis=0), (dB * dB).sum(axis=0)))
        s1 = sum(p[0] for p in parts)
        s2 = sum(p[1] for p in parts)
        n = self.n_paths
        mean = s1 / n
        var = s2 / n - mean * mean
        z_mean = np.abs(mean) / math.sqrt(self.dt / n)
        z_var = np.abs(var - self.dt) / (self.dt * math.sqrt(2.0 / n))
        worst = float(max(z_mean.max(), z_var.max()))
        return {"z_mean_max": float(z_mean.max()), "z_var_max": float(z_var.max()), "ok": worst <= z_max}


def _combine(parts):
    """Chan's pairwise merge of (count, mean, M2) triples, in order."""
    n, mean, m2 = 0, 0.0, 0.0
    for nb, mb, m2b in parts:
        if nb == 0:
            continue
        tot = n + nb
        d = mb - mean
        mean += d * nb / tot
        m2 += m2b + d * d * n * nb / tot
        n = tot
    return n, mean, m2


def _moments(v: np.ndarray):
    if v.size == 0:
        return 0, 0.0, 0.0
    mu = float(v.mean())
    return v.size, mu, float(np.sum((v - mu) ** 2))


def _mean_stderr(parts):
    n, mean, m2 = _combine(parts)
    var = m2 / (n - 1) if n > 1 else 0.0
    return mean, math.sqrt(var / n), n


# --------------------------------------------------------------------------
# closed-form Merton model
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MertonBaseline:
    """Power utility, constant ``lambda`` and ``sigma``; ``S^0 = lambda <M> + M`` with ``M = sigma B``."""

    p: float
    lam: float
    sigma: float
    x: float = 1.0
    T: float = 1.0

    def __post_init__(self):
        power_utility(self.p)  # validates p
        if not (self.sigma > 0 and self.x > 0 and self.T > 0):
            raise ValueError("sigma, x and T must be positive")

    @property
    def pi(self) -> float:
        return self.lam / (1.0 - self.p)

    @property
    def _growth(self) -> float:
        return math.exp(self.p * self.lam ** 2 * self.sigma ** 2 * self.T / (2.0 * (1.0 - self.p)))

    @property
    def u(self) -> float:
        return self.x ** self.p / self.p * self._growth

    @property
    def y(self) -> float:
        return self.x ** (self.p - 1.0) * self._growth

    @property
    def axx(self) -> float:
        return 1.0 - self.p

    @property
    def r0(self) -> float:
        return self.x / (1.0 - self.p)

    @property
    def density_drift(self) -> float:
        """``q`` with ``dR/dP = exp(q M_T - q^2 <M>_T / 2)``."""
        return self.pi - self.lam

    def density(self, m_T) -> np.ndarray:
        q = self.density_drift
        return np.exp(q * np.asarray(m_T) - 0.5 * q * q * self.sigma ** 2 * self.T)

    def u_delta(self, nu0: float = 1.0) -> float:
        return self.x * self.y * nu0 * self.pi * self.sigma ** 2 * self.T

    def axd(self, nu0: float = 1.0) -> float:
        return -self.p * self.x * nu0 * self.pi * self.sigma ** 2 * self.T

    def to_dict(self) -> dict:
        return {"p": self.p, "lambda": self.lam, "sigma": self.sigma, "x": self.x, "T": self.T, "pi": self.pi,
                "u": self.u, "y": self.y, "axx": self.axx, "r0": self.r0}


def merton_baseline(p: float, lambda0: float, sigma: float, x: float = 1.0, T: float = 1.0) -> MertonBaseline:
    return MertonBaseline(float(p), float(lambda0), float(sigma), float(x), float(T))


def tree_proportion(model: MertonBaseline, steps: int, horizon_steps: int | None = None) -> float:
    """Optimal proportion at the root of a binomial tree with ``dt = T/steps``.

    Power utility is myopic, so a tree with only ``horizon_steps`` periods of
    the same ``dt`` gives the same root proportion (default: all of them).
    """
    dt = model.T / steps
    k = steps if horizon_steps is None else horizon_steps
    m = build_binomial(k, dt, model.sigma, model.lam, 0.0)
    pair = solve(m, power_utility(model.p), model.x)
    return float(pair.pi_hat[0])


def tree_convergence_study(model: MertonBaseline, steps: int = 10) -> dict:
    """Root proportions at ``dt`` and ``dt/2`` and their Richardson extrapolation."""
    coarse = tree_proportion(model, steps)
    fine = tree_proportion(model, 2 * steps, horizon_steps=1)
    rich = 2.0 * fine - coarse
    return {"pi_star": model.pi, "pi_tree": coarse, "pi_tree_half": fine, "pi_richardson": rich,
            "error_tree": abs(coarse - model.pi), "error_richardson": abs(rich - model.pi)}


# --------------------------------------------------------------------------
# estimators
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MCEstimate:
    estimate: float
    stderr: float
    n_paths: int
    seed: int
    weight_mean: float = 1.0
    weight_stderr: float = 0.0

    def to_row(self) -> dict:
        return {"estimate": self.estimate, "stderr": self.stderr, "n_paths": self.n_paths, "seed": self.seed}


def _nu_coef(nu_spec) -> np.ndarray:
    f = as_node_function(nu_spec)
    if not isinstance(f, PolyNodeFunction):
        raise ValueError("Monte Carlo needs a polynomial nu (const, state, state2, time)")
    return np.asarray(f.coefficients, dtype=float)


def _pairwise(v: np.ndarray, antithetic: bool) -> np.ndarray:
    if not antithetic:
        return v
    h = v.size // 2
    return 0.5 * (v[:h] + v[h:])


def estimate_first_order(ens: PathEnsemble, model: MertonBaseline, nu_spec=1.0) -> MCEstimate:
    """``xy E^R[F]`` by importance weighting with the closed-form ``dR/dP``."""
    coef = _nu_coef(nu_spec)
    if not np.any(coef):
        return MCEstimate(0.0, 0.0, ens.n_paths, ens.seed)

    def chunk(dB):
        m_T, F, _ = IMPL.path_functionals(dB, ens.dt, model.sigma, model.lam, coef)
        w = model.density(m_T)
        return _moments(_pairwise(w * F, ens.antithetic)), _moments(_pairwise(w, ens.antithetic))

    parts = ens.map_chunks(chunk)
    mean, se, _ = _mean_stderr([p[0] for p in parts])
    wmean, wse, _ = _mean_stderr([p[1] for p in parts])
    scale = model.x * model.y
    return MCEstimate(scale * mean, scale * se, ens.n_paths, ens.seed, wmean, wse)


def tree_first_order(model: MertonBaseline, steps: int = 12, nu0: float = 1.0) -> float:
    """``u_delta`` on the binomial approximation with ``steps`` periods."""
    from .market import compute_F_G
    from .sensitivity import first_order

    m = build_binomial(steps, model.T / steps, model.sigma, model.lam, nu0)
    pair = solve(m, power_utility(model.p), model.x)
    return first_order(pair, compute_F_G(m)[0])


def counterexample_probe(c: float, truncations, ens: PathEnsemble, p: float = 0.5, nu_spec=None) -> list[dict]:
    """``E^R[min(zeta(c, 0), K)]`` for each ``K`` with ``T = 1``, ``M = B``, ``lambda = 1``.

    The default direction ``nu_t = 3 B_t^2`` makes ``nu . B_1`` carry the cubic
    term ``B_1^3`` whose exponential moments are infinite.
    """
    if abs(ens.T - 1.0) > 1e-15:
        raise ValueError("the counterexample lives on T = 1")
    model = MertonBaseline(p, 1.0, 1.0, 1.0, 1.0)
    coef = _nu_coef({"state2": 3.0} if nu_spec is None else nu_spec)
    ks = [float(k) for k in truncations]

    def chunk(dB):
        m_T, F, G = IMPL.path_functionals(dB, ens.dt, 1.0, 1.0, coef)
        w = model.density(m_T)
        with np.errstate(over="ignore"):
            z = np.exp(c * (np.abs(F) + G))
        return [_moments(_pairwise(w * np.minimum(z, k), ens.antithetic)) for k in ks]

    parts = ens.map_chunks(chunk)
    out = []
    for j, k in enumerate(ks):
        mean, se, _ = _mean_stderr([pp[j] for pp in parts])
        out.append({"c": float(c), "K": k, "moment": mean, "stderr": se})
    return out
