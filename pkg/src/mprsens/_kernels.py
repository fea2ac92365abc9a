"""Hot loops over trees and Monte Carlo paths.

Every kernel exists twice: a loop version compiled with numba and a
layer-vectorised numpy version.  ``IMPL`` points at whichever one the
environment selects (see ``_accel``); both are importable for parity tests
and benchmarks.

Tree layout shared by all tree kernels: nodes are numbered breadth first,
layer ``k`` occupies ``layer_ptr[k]:layer_ptr[k+1]``, the children of node
``i`` are ``child_ptr[i]:child_ptr[i+1]`` and all leaves sit in the last
layer.  Edge quantities (``prob``, returns) are stored on the child node.
"""
from types import SimpleNamespace

import numpy as np

from ._accel import USE_NUMBA, njit


# --------------------------------------------------------------------------
# numba versions
# --------------------------------------------------------------------------

@njit
def _nb_forward_accumulate(parent, layer_ptr, edge, init):
    n = parent.shape[0]
    out = np.empty(n)
    out[0] = init
    for j in range(1, n):
        out[j] = out[parent[j]] + edge[j]
    return out


@njit
def _nb_conditional_expectation(child_ptr, layer_ptr, prob, leaf_vals):
    n = child_ptr.shape[0] - 1
    leaf_start = layer_ptr[layer_ptr.shape[0] - 2]
    out = np.empty(n)
    out[leaf_start:] = leaf_vals
    for i in range(leaf_start - 1, -1, -1):
        s = 0.0
        for c in range(child_ptr[i], child_ptr[i + 1]):
            s += prob[c] * out[c]
        out[i] = s
    return out


@njit
def _nb_newton_coefficients(child_ptr, layer_ptr, prob, r, b_leaf, g_leaf):
    n = child_ptr.shape[0] - 1
    leaf_start = layer_ptr[layer_ptr.shape[0] - 2]
    b = np.zeros(n)
    g = np.zeros(n)
    b[leaf_start:] = b_leaf
    g[leaf_start:] = g_leaf
    a_out = np.zeros(n)
    b_out = np.zeros(n)
    for i in range(leaf_start - 1, -1, -1):
        sbd = 0.0
        sgd = 0.0
        sgdd = 0.0
        for c in range(child_ptr[i], child_ptr[i + 1]):
            q = prob[c]
            d = r[c]
            sbd += q * b[c] * d
            sgd += q * g[c] * d
            sgdd += q * g[c] * d * d
        ai = -sbd / sgdd
        bi = -sgd / sgdd
        bn = 0.0
        gn = 0.0
        for c in range(child_ptr[i], child_ptr[i + 1]):
            q = prob[c]
            d = r[c]
            e = 1.0 + bi * d
            bn += q * (b[c] * e + g[c] * ai * d * e)
            gn += q * g[c] * e * e
        a_out[i] = ai
        b_out[i] = bi
        b[i] = bn
        g[i] = gn
    return a_out, b_out


@njit
def _nb_newton_forward(parent, child_ptr, layer_ptr, r, a, bco):
    n = parent.shape[0]
    leaf_start = layer_ptr[layer_ptr.shape[0] - 2]
    w = np.zeros(n)
    dh = np.zeros(n)
    for i in range(leaf_start):
        dh[i] = a[i] + bco[i] * w[i]
        for c in range(child_ptr[i], child_ptr[i + 1]):
            w[c] = w[i] + dh[i] * r[c]
    return dh


@njit
def _nb_foc_terms(child_ptr, layer_ptr, prob, r, yproc):
    leaf_start = layer_ptr[layer_ptr.shape[0] - 2]
    num = np.zeros(leaf_start)
    scale = np.zeros(leaf_start)
    for i in range(leaf_start):
        for c in range(child_ptr[i], child_ptr[i + 1]):
            num[i] += prob[c] * yproc[c] * r[c]
            scale[i] += prob[c] * yproc[c] * abs(r[c])
    return num, scale


@njit
def _nb_path_functionals(dB, dt, sigma, lam, nu_coef):
    n_paths, n_steps = dB.shape
    m_t = np.empty(n_paths)
    f = np.empty(n_paths)
    g = np.empty(n_paths)
    c0, c1, c2, c3 = nu_coef[0], nu_coef[1], nu_coef[2], nu_coef[3]
    qv = sigma * sigma * dt
    for p in range(n_paths):
        m = 0.0
        fs = 0.0
        gs = 0.0
        for k in range(n_steps):
            nu = c0 + c1 * m + c2 * m * m + c3 * k * dt
            dm = sigma * dB[p, k]
            fs += nu * (lam * qv + dm)
            gs += nu * nu * qv
            m += dm
        m_t[p] = m
        f[p] = fs
        g[p] = gs
    return m_t, f, g


# --------------------------------------------------------------------------
# numpy versions
# --------------------------------------------------------------------------

def _layers(layer_ptr):
    return range(len(layer_ptr) - 1)


def _np_forward_accumulate(parent, layer_ptr, edge, init):
    out = np.empty(parent.shape[0])
    out[0] = init
    for k in range(1, len(layer_ptr) - 1):
        lo, hi = layer_ptr[k], layer_ptr[k + 1]
        out[lo:hi] = out[parent[lo:hi]] + edge[lo:hi]
    return out


def _segment_sum(vals, starts, offset):
    return np.add.reduceat(vals, starts - offset)


def _np_conditional_expectation(child_ptr, layer_ptr, prob, leaf_vals):
    n = child_ptr.shape[0] - 1
    nl = len(layer_ptr) - 1
    out = np.empty(n)
    out[layer_ptr[nl - 1]:] = leaf_vals
    for k in range(nl - 2, -1, -1):
        lo, hi = layer_ptr[k], layer_ptr[k + 1]
        clo, chi = layer_ptr[k + 1], layer_ptr[k + 2]
        out[lo:hi] = _segment_sum(prob[clo:chi] * out[clo:chi], child_ptr[lo:hi], clo)
    return out


def _np_newton_coefficients(child_ptr, layer_ptr, prob, r, b_leaf, g_leaf):
    n = child_ptr.shape[0] - 1
    nl = len(layer_ptr) - 1
    leaf_start = layer_ptr[nl - 1]
    b = np.zeros(n)
    g = np.zeros(n)
    b[leaf_start:] = b_leaf
    g[leaf_start:] = g_leaf
    a_out = np.zeros(n)
    b_out = np.zeros(n)
    for k in range(nl - 2, -1, -1):
        lo, hi = layer_ptr[k], layer_ptr[k + 1]
        clo, chi = layer_ptr[k + 1], layer_ptr[k + 2]
        starts = child_ptr[lo:hi]
        q, d = prob[clo:chi], r[clo:chi]
        bc, gc = b[clo:chi], g[clo:chi]
        sbd = _segment_sum(q * bc * d, starts, clo)
        sgd = _segment_sum(q * gc * d, starts, clo)
        sgdd = _segment_sum(q * gc * d * d, starts, clo)
        ai = -sbd / sgdd
        bi = -sgd / sgdd
        counts = np.diff(child_ptr[lo:hi + 1])
        a_c = np.repeat(ai, counts)
        b_c = np.repeat(bi, counts)
        e = 1.0 + b_c * d
        b[lo:hi] = _segment_sum(q * (bc * e + gc * a_c * d * e), starts, clo)
        g[lo:hi] = _segment_sum(q * gc * e * e, starts, clo)
        a_out[lo:hi] = ai
        b_out[lo:hi] = bi
    return a_out, b_out


def _np_newton_forward(parent, child_ptr, layer_ptr, r, a, bco):
    n = parent.shape[0]
    nl = len(layer_ptr) - 1
    w = np.zeros(n)
    dh = np.zeros(n)
    for k in range(nl - 1):
        lo, hi = layer_ptr[k], layer_ptr[k + 1]
        dh[lo:hi] = a[lo:hi] + bco[lo:hi] * w[lo:hi]
        clo, chi = layer_ptr[k + 1], layer_ptr[k + 2]
        par = parent[clo:chi]
        w[clo:chi] = w[par] + dh[par] * r[clo:chi]
    return dh


def _np_foc_terms(child_ptr, layer_ptr, prob, r, yproc):
    nl = len(layer_ptr) - 1
    leaf_start = layer_ptr[nl - 1]
    num = np.zeros(leaf_start)
    scale = np.zeros(leaf_start)
    for k in range(nl - 1):
        lo, hi = layer_ptr[k], layer_ptr[k + 1]
        clo, chi = layer_ptr[k + 1], layer_ptr[k + 2]
        qy = prob[clo:chi] * yproc[clo:chi]
        d = r[clo:chi]
        num[lo:hi] = _segment_sum(qy * d, child_ptr[lo:hi], clo)
        scale[lo:hi] = _segment_sum(qy * np.abs(d), child_ptr[lo:hi], clo)
    return num, scale


def _np_path_functionals(dB, dt, sigma, lam, nu_coef):
    n_paths, n_steps = dB.shape
    c0, c1, c2, c3 = (float(c) for c in nu_coef)
    dm = sigma * dB
    m_left = np.zeros_like(dm)
    np.cumsum(dm[:, :-1], axis=1, out=m_left[:, 1:])
    t_left = np.arange(n_steps) * dt
    nu = c0 + c1 * m_left + c2 * m_left * m_left + c3 * t_left
    qv = sigma * sigma * dt
    f = np.sum(nu * (lam * qv + dm), axis=1)
    g = np.sum(nu * nu, axis=1) * qv
    return m_left[:, -1] + dm[:, -1], f, g


_NAMES = (
    "forward_accumulate",
    "conditional_expectation",
    "newton_coefficients",
    "newton_forward",
    "foc_terms",
    "path_functionals",
)

numba_impl = SimpleNamespace(name="numba", **{k: globals()["_nb_" + k] for k in _NAMES})
numpy_impl = SimpleNamespace(name="numpy", **{k: globals()["_np_" + k] for k in _NAMES})

IMPL = numba_impl if USE_NUMBA else numpy_impl
