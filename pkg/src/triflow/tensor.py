"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run: operations executed while a ComputationTape is active append
backward closures to it; backward() replays them in reverse, accumulating
into .grad buffers (which persist across calls until cleared). Everything is
float64 and single-threaded by contract, so gradients are bit-reproducible
and pass central finite-difference checks.

Elementwise/normalization/softmax/cross-entropy work is delegated to the
active kernel backend (see backend.py); matmuls stay numpy/BLAS either way.
"""

from __future__ import annotations

import numpy as np

from .backend import kernels as K
from .errors import ContractError, NonFiniteError, ShapeError

# ---- tensor and tape ----


class Tensor:
    """A float64 array plus an optional same-shape gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keeps 0-d scalars 0-d
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g):
        """Add g into the gradient buffer, allocating it on first use."""
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"


_TAPE_STACK: list["ComputationTape"] = []


class ComputationTape:
    """Ordered record of differentiable operations for one forward pass."""

    def __init__(self):
        self.records = []  # (output tensor, backward closure)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make(data, inputs, backward_fn):
    """Build an op output; record backward_fn if a tape is active and needed."""
    requires = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    tape = _active_tape()
    if tape is not None and requires:
        tape.records.append((out, backward_fn))
    return out


def backward(tape: ComputationTape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into every requires_grad tensor's .grad.

    The tape is freed afterwards; gradients add up across calls until cleared.
    """
    if loss.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones((), dtype=np.float64)
    for out, fn in reversed(tape.records):
        if out.grad is not None:
            fn(out.grad)
    tape.records.clear()


def zero_grads(params) -> None:
    """Clear gradient buffers of an iterable (or dict) of tensors."""
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        p.zero_grad()


# ---- primitive operations ----


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product [m,k] @ [k,n] -> [m,n]."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            b.accumulate(a.data.T @ g)

    return _make(out_data, (a, b), bwd)


def matmul_tb(a: Tensor, b: Tensor) -> Tensor:
    """a @ b.T for [m,k] and [n,k]; used by the tied vocabulary head."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"matmul_tb: incompatible shapes {a.shape} and {b.shape}")
    out_data = a.data @ b.data.T

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g @ b.data)
        if b.requires_grad:
            b.accumulate(g.T @ a.data)

    return _make(out_data, (a, b), bwd)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul [h,m,k] @ [h,k,n] -> [h,m,n]."""
    if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[0] != b.shape[0] \
            or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: incompatible shapes {a.shape} and {b.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.transpose(0, 2, 1))
        if b.requires_grad:
            b.accumulate(a.data.transpose(0, 2, 1) @ g)

    return _make(out_data, (a, b), bwd)


def bmm_tb(a: Tensor, b: Tensor) -> Tensor:
    """Batched a @ b.T over heads: [h,m,k] and [h,n,k] -> [h,m,n]."""
    if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[0] != b.shape[0] \
            or a.shape[2] != b.shape[2]:
        raise ShapeError(f"bmm_tb: incompatible shapes {a.shape} and {b.shape}")
    out_data = a.data @ b.data.transpose(0, 2, 1)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g @ b.data)
        if b.requires_grad:
            b.accumulate(g.transpose(0, 2, 1) @ a.data)

    return _make(out_data, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of same-shape tensors (residual connections)."""
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g)

    return _make(a.data + b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors (FFN gating)."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * b.data)
        if b.requires_grad:
            b.accumulate(g * a.data)

    return _make(a.data * b.data, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar constant."""

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * s)

    return _make(a.data * s, (a,), bwd)


def add_rows(x: Tensor, idx: np.ndarray, r: Tensor) -> Tensor:
    """Add row vector r [d] or [1,d] to rows idx of x [n,d]."""
    d = x.shape[1] if x.data.ndim == 2 else None
    if d is None or r.shape not in ((d,), (1, d)):
        raise ShapeError(f"add_rows: shapes {x.shape} and {r.shape}")
    out_data = x.data.copy()
    out_data[idx] += r.data.reshape(d)

    def bwd(g):
        if x.requires_grad:
            x.accumulate(g)
        if r.requires_grad:
            r.accumulate(g[idx].sum(axis=0).reshape(r.shape))

    return _make(out_data, (x, r), bwd)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows by a unique index array; backward scatters into place."""
    out_data = x.data[idx]

    def bwd(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[idx] += g  # idx unique by contract

    return _make(out_data, (x,), bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Look up rows of table [V,d] by (possibly repeated) integer ids."""
    out_data = table.data[ids]

    def bwd(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, g)

    return _make(out_data, (table,), bwd)


def combine_rows(pieces, index_lists, n: int) -> Tensor:
    """Scatter row blocks back into an [n,d] tensor; indices partition [0,n)."""
    d = pieces[0].shape[1]
    out_data = np.empty((n, d), dtype=np.float64)
    covered = 0
    for piece, idx in zip(pieces, index_lists):
        if len(idx) != piece.shape[0]:
            raise ShapeError(f"combine_rows: {piece.shape[0]} rows vs {len(idx)} indices")
        out_data[idx] = piece.data
        covered += len(idx)
    if covered != n:
        raise ContractError(f"combine_rows: indices cover {covered} of {n} rows")

    def bwd(g):
        for piece, idx in zip(pieces, index_lists):
            if piece.requires_grad:
                piece.accumulate(g[idx])

    return _make(out_data, tuple(pieces), bwd)


def to_heads(x: Tensor, h: int) -> Tensor:
    """[n, d] -> [h, n, d/h] head split."""
    n, d = x.shape
    if d % h:
        raise ShapeError(f"to_heads: {d} not divisible by {h} heads")
    out_data = np.ascontiguousarray(x.data.reshape(n, h, d // h).transpose(1, 0, 2))

    def bwd(g):
        if x.requires_grad:
            x.accumulate(g.transpose(1, 0, 2).reshape(n, d))

    return _make(out_data, (x,), bwd)


def from_heads(x: Tensor) -> Tensor:
    """[h, n, hd] -> [n, h*hd] head merge."""
    h, n, hd = x.shape
    out_data = np.ascontiguousarray(x.data.transpose(1, 0, 2).reshape(n, h * hd))

    def bwd(g):
        if x.requires_grad:
            x.accumulate(np.ascontiguousarray(
                g.reshape(n, h, hd).transpose(1, 0, 2)))

    return _make(out_data, (x,), bwd)


def rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate feature pairs (2j, 2j+1) of [h,n,hd] by per-position angles."""
    h, n, hd = x.shape
    if cos.shape != (n, hd // 2):
        raise ShapeError(f"rotary: angle table {cos.shape} vs tokens ({n},{hd // 2})")
    xe = x.data[:, :, 0::2]
    xo = x.data[:, :, 1::2]
    out_data = np.empty_like(x.data)
    out_data[:, :, 0::2] = xe * cos - xo * sin
    out_data[:, :, 1::2] = xe * sin + xo * cos

    def bwd(g):
        if x.requires_grad:
            ge = g[:, :, 0::2]
            go = g[:, :, 1::2]
            gx = np.empty_like(g)
            gx[:, :, 0::2] = ge * cos + go * sin
            gx[:, :, 1::2] = -ge * sin + go * cos
            x.accumulate(gx)

    return _make(out_data, (x,), bwd)


def silu(x: Tensor) -> Tensor:
    """Elementwise SiLU x*sigmoid(x)."""
    out_data = K.silu_fwd(x.data)
    x_saved = x.data

    def bwd(g):
        if x.requires_grad:
            x.accumulate(K.silu_bwd(x_saved, g))

    return _make(out_data, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    """Elementwise logistic sigmoid."""
    out_data = K.sigmoid_fwd(x.data)

    def bwd(g):
        if x.requires_grad:
            x.accumulate(K.sigmoid_bwd(out_data, g))

    return _make(out_data, (x,), bwd)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Row-wise RMS normalization of [n,d], scaled by gain [d]."""
    if x.data.ndim != 2 or gain.shape != (x.shape[1],):
        raise ShapeError(f"rms_norm: shapes {x.shape} and {gain.shape}")
    out_data, inv = K.rmsnorm_fwd(x.data, gain.data, eps)
    x_saved = x.data

    def bwd(g):
        gx, gg = K.rmsnorm_bwd(x_saved, gain.data, inv, g)
        if x.requires_grad:
            x.accumulate(gx)
        if gain.requires_grad:
            gain.accumulate(gg)

    return _make(out_data, (x, gain), bwd)


def softmax_rows(x: Tensor) -> Tensor:
    """Row softmax of [m,n]; -inf entries allowed and map to exactly 0."""
    if np.all(np.isneginf(x.data), axis=1).any():
        raise ContractError("softmax_rows: a row is fully masked")
    out_data = K.softmax_rows_fwd(x.data)

    def bwd(g):
        if x.requires_grad:
            dot = (g * out_data).sum(axis=1, keepdims=True)
            x.accumulate(out_data * (g - dot))

    return _make(out_data, (x,), bwd)


def masked_softmax(scores: Tensor, bias: np.ndarray) -> Tensor:
    """Softmax over the last axis of [h,n,n] scores + additive {0,-inf} bias."""
    if scores.data.ndim != 3 or bias.shape != scores.shape[1:]:
        raise ShapeError(f"masked_softmax: scores {scores.shape} vs bias {bias.shape}")
    if not np.isfinite(bias).any(axis=1).all():
        raise ContractError("masked_softmax: a row admits no unmasked position")
    out_data = K.masked_softmax_fwd(scores.data, bias)

    def bwd(g):
        if scores.requires_grad:
            scores.accumulate(K.masked_softmax_bwd(out_data, g))

    return _make(out_data, (scores,), bwd)


def cross_entropy_mean(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax."""
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    if logits.shape[0] == 0:
        raise ContractError("cross_entropy: empty target set")
    targets = np.ascontiguousarray(targets, dtype=np.int64)
    nll, probs = K.cross_entropy_fwd(logits.data, targets)
    m = logits.shape[0]

    def bwd(g):
        if logits.requires_grad:
            logits.accumulate(K.cross_entropy_bwd(probs, targets, float(g) / m))

    return _make(nll.mean(), (logits,), bwd)


def mse_mean(pred: Tensor, target) -> Tensor:
    """Mean squared error against a constant array or another tensor."""
    tdata = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != tdata.shape:
        raise ShapeError(f"mse: shape mismatch {pred.shape} vs {tdata.shape}")
    diff = pred.data - tdata
    n = diff.size
    inputs = (pred, target) if isinstance(target, Tensor) else (pred,)

    def bwd(g):
        contrib = (2.0 * float(g) / n) * diff
        if pred.requires_grad:
            pred.accumulate(contrib)
        if isinstance(target, Tensor) and target.requires_grad:
            target.accumulate(-contrib)

    return _make((diff * diff).mean(), inputs, bwd)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""

    def bwd(g):
        if x.requires_grad:
            x.accumulate(np.full_like(x.data, float(g)))

    return _make(x.data.sum(), (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    """Mean of all entries, as a scalar tensor."""
    n = x.size

    def bwd(g):
        if x.requires_grad:
            x.accumulate(np.full_like(x.data, float(g) / n))

    return _make(x.data.mean(), (x,), bwd)


def add_scalars(terms: list[Tensor]) -> Tensor:
    """Sum of scalar tensors (loss combination)."""
    for t in terms:
        if t.shape != ():
            raise ShapeError(f"add_scalars: non-scalar term of shape {t.shape}")

    def bwd(g):
        for t in terms:
            if t.requires_grad:
                t.accumulate(g)

    return _make(np.array(sum(float(t.data) for t in terms)), tuple(terms), bwd)


# ---- optimizer ----


def adamw_step(params: dict, grads: dict, state: dict, lr: float = 5e-5,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.02) -> None:
    """One decoupled-weight-decay Adam update, in place.

    params: name -> Tensor; grads: name -> ndarray (missing/None = zeros).
    state carries per-name first/second moments and the shared step count.
    A non-finite gradient aborts the whole step, naming the parameter.
    """
    for name in params:
        g = grads.get(name)
        if g is not None and not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}; step aborted")
    state["step"] = state.get("step", 0) + 1
    m_buf = state.setdefault("m", {})
    v_buf = state.setdefault("v", {})
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if name not in m_buf:
            m_buf[name] = np.zeros_like(p.data)
            v_buf[name] = np.zeros_like(p.data)
        K.adamw_update(p.data, g, m_buf[name], v_buf[name], state["step"],
                       lr, beta1, beta2, eps, weight_decay)
