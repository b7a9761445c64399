"""Numba @njit twins of the numpy kernels.

Fused single-pass loops for the exp-heavy elementwise work that dominates
step time on one core. Same contracts as _kernels_numpy; no fastmath and no
parallel sections, so each backend is bit-deterministic run to run (the two
backends agree to float64 round-off, not necessarily to the last ulp).
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _silu_flat(x, out):
    for i in range(x.size):
        out[i] = x[i] / (1.0 + math.exp(-x[i]))


def silu_fwd(x):
    """SiLU x*sigmoid(x), elementwise."""
    out = np.empty_like(x)
    _silu_flat(x.ravel(), out.ravel())
    return out


@njit(cache=True)
def _silu_bwd_flat(x, gy, out):
    for i in range(x.size):
        s = 1.0 / (1.0 + math.exp(-x[i]))
        out[i] = gy[i] * (s * (1.0 + x[i] * (1.0 - s)))


def silu_bwd(x, gy):
    """Gradient of SiLU wrt x given upstream gy."""
    out = np.empty_like(x)
    _silu_bwd_flat(x.ravel(), gy.ravel(), out.ravel())
    return out


@njit(cache=True)
def _sigmoid_flat(x, out):
    for i in range(x.size):
        out[i] = 1.0 / (1.0 + math.exp(-x[i]))


def sigmoid_fwd(x):
    """Logistic sigmoid, elementwise."""
    out = np.empty_like(x)
    _sigmoid_flat(x.ravel(), out.ravel())
    return out


@njit(cache=True)
def _sigmoid_bwd_flat(y, gy, out):
    for i in range(y.size):
        out[i] = gy[i] * y[i] * (1.0 - y[i])


def sigmoid_bwd(y, gy):
    """Gradient of sigmoid wrt x given saved output y."""
    out = np.empty_like(y)
    _sigmoid_bwd_flat(y.ravel(), gy.ravel(), out.ravel())
    return out


@njit(cache=True)
def _rmsnorm_fwd(x, g, eps, y, inv):
    n, d = x.shape
    for i in range(n):
        ms = 0.0
        for j in range(d):
            ms += x[i, j] * x[i, j]
        r = 1.0 / math.sqrt(ms / d + eps)
        inv[i] = r
        for j in range(d):
            y[i, j] = x[i, j] * r * g[j]


def rmsnorm_fwd(x, g, eps):
    """y[i] = x[i] * g / sqrt(mean(x[i]^2) + eps). Returns (y, inv_rms[n])."""
    y = np.empty_like(x)
    inv = np.empty(x.shape[0], dtype=np.float64)
    _rmsnorm_fwd(x, g, eps, y, inv)
    return y, inv


@njit(cache=True)
def _rmsnorm_bwd(x, g, inv, gy, gx, gg):
    n, d = x.shape
    for j in range(d):
        gg[j] = 0.0
    for i in range(n):
        r = inv[i]
        dot = 0.0
        for j in range(d):
            dot += gy[i, j] * g[j] * x[i, j]
        coef = r * r * r * dot / d
        for j in range(d):
            gx[i, j] = gy[i, j] * g[j] * r - x[i, j] * coef
            gg[j] += gy[i, j] * x[i, j] * r


def rmsnorm_bwd(x, g, inv, gy):
    """Gradients (gx, gg) of rmsnorm given saved x, gain and inv_rms."""
    gx = np.empty_like(x)
    gg = np.empty_like(g)
    _rmsnorm_bwd(x, g, inv, gy, gx, gg)
    return gx, gg


@njit(cache=True)
def _masked_softmax_fwd(scores, bias, out):
    h, n, _ = scores.shape
    for a in range(h):
        for i in range(n):
            m = -np.inf
            for j in range(n):
                z = scores[a, i, j] + bias[i, j]
                if z > m:
                    m = z
            s = 0.0
            for j in range(n):
                e = math.exp(scores[a, i, j] + bias[i, j] - m)
                out[a, i, j] = e
                s += e
            for j in range(n):
                out[a, i, j] /= s


def masked_softmax_fwd(scores, bias):
    """Softmax rows of scores+bias; bias entries are 0 or -inf. [h,n,n]."""
    out = np.empty_like(scores)
    _masked_softmax_fwd(scores, bias, out)
    return out


@njit(cache=True)
def _masked_softmax_bwd(p, gp, out):
    h, n, _ = p.shape
    for a in range(h):
        for i in range(n):
            dot = 0.0
            for j in range(n):
                dot += gp[a, i, j] * p[a, i, j]
            for j in range(n):
                out[a, i, j] = p[a, i, j] * (gp[a, i, j] - dot)


def masked_softmax_bwd(p, gp):
    """Softmax VJP: gs = p * (gp - sum(gp*p)); masked lanes stay exactly 0."""
    out = np.empty_like(p)
    _masked_softmax_bwd(p, gp, out)
    return out


@njit(cache=True)
def _softmax_rows(x, out):
    m_rows, n = x.shape
    for i in range(m_rows):
        m = -np.inf
        for j in range(n):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(n):
            e = math.exp(x[i, j] - m)
            out[i, j] = e
            s += e
        for j in range(n):
            out[i, j] /= s


def softmax_rows_fwd(x):
    """Row softmax of [m, n]; -inf entries allowed and map to exactly 0."""
    out = np.empty_like(x)
    _softmax_rows(x, out)
    return out


@njit(cache=True)
def _cross_entropy_fwd(logits, targets, nll, probs):
    m_rows, v = logits.shape
    for i in range(m_rows):
        m = -np.inf
        for j in range(v):
            if logits[i, j] > m:
                m = logits[i, j]
        s = 0.0
        for j in range(v):
            e = math.exp(logits[i, j] - m)
            probs[i, j] = e
            s += e
        for j in range(v):
            probs[i, j] /= s
        nll[i] = math.log(s) - (logits[i, targets[i]] - m)


def cross_entropy_fwd(logits, targets):
    """Per-row -log softmax(logits)[target]. Returns (nll[m], probs[m,V])."""
    nll = np.empty(logits.shape[0], dtype=np.float64)
    probs = np.empty_like(logits)
    _cross_entropy_fwd(logits, targets, nll, probs)
    return nll, probs


@njit(cache=True)
def _cross_entropy_bwd(probs, targets, gscale, out):
    m_rows, v = probs.shape
    for i in range(m_rows):
        for j in range(v):
            out[i, j] = probs[i, j] * gscale
        out[i, targets[i]] -= gscale


def cross_entropy_bwd(probs, targets, gscale):
    """Gradient of gscale * sum(nll) wrt logits."""
    out = np.empty_like(probs)
    _cross_entropy_bwd(probs, targets, gscale, out)
    return out


@njit(cache=True)
def _adamw(p, g, m, v, step, lr, beta1, beta2, eps, weight_decay):
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    for i in range(p.size):
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        p[i] -= lr * ((m[i] / c1) / (math.sqrt(v[i] / c2) + eps)
                      + weight_decay * p[i])


def adamw_update(p, g, m, v, step, lr, beta1, beta2, eps, weight_decay):
    """Decoupled-weight-decay Adam with bias correction; mutates p, m, v."""
    _adamw(p.ravel(), g.ravel(), m.ravel(), v.ravel(), step,
           lr, beta1, beta2, eps, weight_decay)
