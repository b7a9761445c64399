"""Pure-numpy kernel implementations.

Reference semantics for every hot kernel; the numba twins in
_kernels_numba.py must agree with these to float64 round-off.
All inputs/outputs are contiguous float64 arrays.
"""

import numpy as np


# ---- elementwise activations ----

def silu_fwd(x):
    """SiLU x*sigmoid(x), elementwise."""
    return x / (1.0 + np.exp(-x))


def silu_bwd(x, gy):
    """Gradient of SiLU wrt x given upstream gy."""
    s = 1.0 / (1.0 + np.exp(-x))
    return gy * (s * (1.0 + x * (1.0 - s)))


def sigmoid_fwd(x):
    """Logistic sigmoid, elementwise."""
    return 1.0 / (1.0 + np.exp(-x))


def sigmoid_bwd(y, gy):
    """Gradient of sigmoid wrt x given saved output y."""
    return gy * y * (1.0 - y)


# ---- rms normalization over the last axis of [n, d] ----

def rmsnorm_fwd(x, g, eps):
    """y[i] = x[i] * g / sqrt(mean(x[i]^2) + eps). Returns (y, inv_rms[n])."""
    inv = 1.0 / np.sqrt((x * x).mean(axis=1) + eps)
    return x * inv[:, None] * g[None, :], inv


def rmsnorm_bwd(x, g, inv, gy):
    """Gradients (gx, gg) of rmsnorm given saved x, gain and inv_rms."""
    d = x.shape[1]
    gyg = gy * g[None, :]
    dot = (gyg * x).sum(axis=1)  # per-row sum gy*g*x
    gx = gyg * inv[:, None] - x * (inv**3 * dot / d)[:, None]
    gg = (gy * x * inv[:, None]).sum(axis=0)
    return gx, gg


# ---- masked softmax over the last axis of [h, n, n] ----

def masked_softmax_fwd(scores, bias):
    """Softmax rows of scores+bias; bias entries are 0 or -inf. [h,n,n]."""
    z = scores + bias[None, :, :]
    m = z.max(axis=2, keepdims=True)  # finite: every row has >=1 unmasked lane
    e = np.exp(z - m)
    return e / e.sum(axis=2, keepdims=True)


def masked_softmax_bwd(p, gp):
    """Softmax VJP: gs = p * (gp - sum(gp*p)); masked lanes stay exactly 0."""
    dot = (gp * p).sum(axis=2, keepdims=True)
    return p * (gp - dot)


def softmax_rows_fwd(x):
    """Row softmax of [m, n]; -inf entries allowed and map to exactly 0."""
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


# ---- token cross-entropy over [m, V] ----

def cross_entropy_fwd(logits, targets):
    """Per-row -log softmax(logits)[target]. Returns (nll[m], probs[m,V])."""
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    e = np.exp(z)
    se = e.sum(axis=1)
    probs = e / se[:, None]
    rows = np.arange(logits.shape[0])
    nll = np.log(se) - z[rows, targets]
    return nll, probs


def cross_entropy_bwd(probs, targets, gscale):
    """Gradient of gscale * sum(nll) wrt logits."""
    g = probs * gscale
    rows = np.arange(probs.shape[0])
    g[rows, targets] -= gscale
    return g


# ---- AdamW in-place update on flat views ----

def adamw_update(p, g, m, v, step, lr, beta1, beta2, eps, weight_decay):
    """Decoupled-weight-decay Adam with bias correction; mutates p, m, v."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1**step)
    vhat = v / (1.0 - beta2**step)
    p -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p)
