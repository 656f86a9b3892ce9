"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (float32 for training, float64 for gradient
verification). Operations executed inside a `Tape` context record backward
closures; `backward()` replays them in reverse creation order, which is a
valid topological order by construction. Outside a Tape, operations run
forward-only with no recording overhead.

Broadcasting is deliberately restricted to row-wise bias addition; every
other shape mismatch raises ShapeError so attention-shaped bugs fail loudly.
"""

import math

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DegenerateVectorError(ValueError):
    """A vector whose norm falls below the safe threshold was normalized."""


class ContractError(RuntimeError):
    """An operation precondition was violated (non-scalar loss, missing grad...)."""


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_active_tape = None


class Tape:
    """Computation record: ordered list of op-output nodes for one forward pass."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        global _active_tape
        if _active_tape is not None:
            raise ContractError("nested tapes are not supported")
        _active_tape = self
        return self

    def __exit__(self, *exc):
        global _active_tape
        _active_tape = None
        return False


class Tensor:
    """Dense array plus an optional gradient buffer of identical shape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else None)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._bwd = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"


def parameter(data, dtype=np.float32, name=None):
    """Trainable leaf tensor."""
    return Tensor(np.array(data, dtype=dtype), requires_grad=True, dtype=dtype, name=name)


def constant(data, dtype=None, name=None):
    """Non-trainable tensor (inputs, targets)."""
    return Tensor(data, requires_grad=False, dtype=dtype, name=name)


def _make(data, parents, bwd):
    out = Tensor(data)
    if _active_tape is not None:
        out._parents = tuple(parents)
        out._bwd = bwd
        _active_tape.nodes.append(out)
    return out


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    """Elementwise addition; b may also be a 1-D bias broadcast over rows."""
    if a.shape == b.shape:
        def bwd(g, a=a, b=b):
            a._accumulate(g)
            b._accumulate(g)
        return _make(a.data + b.data, (a, b), bwd)
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        def bwd(g, a=a, b=b):
            a._accumulate(g)
            b._accumulate(g.reshape(-1, b.shape[0]).sum(axis=0))
        return _make(a.data + b.data, (a, b), bwd)
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g, a=a, b=b):
        a._accumulate(g)
        b._accumulate(-g)
    return _make(a.data - b.data, (a, b), bwd)


def mul(a, b):
    """Elementwise product, same shapes only."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g, a=a, b=b):
        a._accumulate(g * b.data)
        b._accumulate(g * a.data)
    return _make(a.data * b.data, (a, b), bwd)


def scale(a, c):
    """Multiply by a python scalar constant."""
    c = float(c)

    def bwd(g, a=a, c=c):
        a._accumulate(g * c)
    return _make(a.data * c, (a,), bwd)


def add_const(a, arr):
    """Add a constant array (no gradient into the constant)."""
    arr = np.asarray(arr, dtype=a.data.dtype)
    if arr.shape != a.shape:
        raise ShapeError(f"add_const: incompatible shapes {a.shape} and {arr.shape}")

    def bwd(g, a=a):
        a._accumulate(g)
    return _make(a.data + arr, (a,), bwd)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g, a=a, b=b):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)
    return _make(a.data @ b.data, (a, b), bwd)


def transpose(a):
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected matrix, got shape {a.shape}")

    def bwd(g, a=a):
        a._accumulate(g.T)
    return _make(a.data.T.copy(), (a,), bwd)


def reshape(a, shape):
    shape = tuple(shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")

    def bwd(g, a=a):
        a._accumulate(g.reshape(a.shape))
    return _make(a.data.reshape(shape).copy(), (a,), bwd)


def concat_rows(parts):
    """Stack matrices (or row vectors) along axis 0."""
    parts = list(parts)
    mats = [p.data.reshape(1, -1) if p.data.ndim == 1 else p.data for p in parts]
    width = mats[0].shape[1]
    for m in mats:
        if m.ndim != 2 or m.shape[1] != width:
            raise ShapeError(f"concat_rows: inconsistent widths {[m.shape for m in mats]}")

    def bwd(g, parts=parts, mats=mats):
        r = 0
        for p, m in zip(parts, mats):
            chunk = g[r:r + m.shape[0]]
            p._accumulate(chunk.reshape(p.shape))
            r += m.shape[0]
    return _make(np.concatenate(mats, axis=0), parts, bwd)


def slice_rows(a, start, stop):
    if a.data.ndim != 2 or not (0 <= start <= stop <= a.shape[0]):
        raise ShapeError(f"slice_rows: [{start}:{stop}] invalid for shape {a.shape}")

    def bwd(g, a=a, start=start, stop=stop):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        a._accumulate(full)
    return _make(a.data[start:stop].copy(), (a,), bwd)


def slice_cols(a, start, stop):
    if a.data.ndim != 2 or not (0 <= start <= stop <= a.shape[1]):
        raise ShapeError(f"slice_cols: [{start}:{stop}] invalid for shape {a.shape}")

    def bwd(g, a=a, start=start, stop=stop):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        a._accumulate(full)
    return _make(a.data[:, start:stop].copy(), (a,), bwd)


def concat_cols(parts):
    parts = list(parts)
    rows = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != rows:
            raise ShapeError(f"concat_cols: inconsistent heights {[p.shape for p in parts]}")

    def bwd(g, parts=parts):
        c = 0
        for p in parts:
            p._accumulate(g[:, c:c + p.shape[1]])
            c += p.shape[1]
    return _make(np.concatenate([p.data for p in parts], axis=1), parts, bwd)


def sum_all(a):
    def bwd(g, a=a):
        a._accumulate(np.full_like(a.data, float(g)))
    return _make(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), bwd)


def softmax_lastdim(x):
    """Overflow-safe softmax over the last dimension."""
    if x.shape[-1] < 1:
        raise ShapeError("softmax_lastdim: empty last dimension")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g, x=x, y=y):
        dot = (g * y).sum(axis=-1, keepdims=True)
        x._accumulate(y * (g - dot))
    return _make(y, (x,), bwd)


def layer_norm(x, gain, bias, eps=1e-6):
    """Zero-mean unit-variance over the last dimension, then affine."""
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bwd(g, x=x, gain=gain, bias=bias, xhat=xhat, inv=inv, d=d):
        bias._accumulate(g.reshape(-1, d).sum(axis=0))
        gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        gh = g * gain.data
        mean_gh = gh.mean(axis=-1, keepdims=True)
        mean_ghx = (gh * xhat).mean(axis=-1, keepdims=True)
        x._accumulate(inv * (gh - mean_gh - xhat * mean_ghx))
    return _make(out, (x, gain, bias), bwd)


def gelu(x):
    """Exact erf-based GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def bwd(g, x=x, cdf=cdf):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        x._accumulate(g * (cdf + x.data * pdf))
    return _make(out, (x,), bwd)


def l2_normalize_rows(x, eps=1e-12):
    """Scale each row to unit L2 norm; rows with norm < eps are degenerate."""
    mat = x.data.reshape(1, -1) if x.data.ndim == 1 else x.data
    norms = np.sqrt((mat * mat).sum(axis=-1, keepdims=True))
    if np.any(norms < eps):
        raise DegenerateVectorError(
            f"l2_normalize_rows: row norm below {eps} (min {float(norms.min()):.3e})")
    y = (mat / norms).reshape(x.shape)

    def bwd(g, x=x, y=y, norms=norms):
        gm = g.reshape(1, -1) if g.ndim == 1 else g
        ym = y.reshape(1, -1) if y.ndim == 1 else y
        dot = (gm * ym).sum(axis=-1, keepdims=True)
        x._accumulate(((gm - dot * ym) / norms).reshape(x.shape))
    return _make(y, (x,), bwd)


def cross_entropy_rows(logits, labels):
    """Mean softmax cross-entropy over rows; labels are integer class indices."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy_rows: expected matrix, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= k:
        raise ContractError("cross_entropy_rows: labels out of range")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + logits.data.max(axis=1)
    loss = (lse - logits.data[np.arange(n), labels]).mean()

    def bwd(g, logits=logits, labels=labels, shifted=shifted, n=n):
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        logits._accumulate(float(g) * p / n)
    return _make(np.asarray(loss, dtype=logits.data.dtype), (logits,), bwd)


def smooth_l1_vs(pred, target, beta):
    """Elementwise Smooth-L1 of pred against a constant target array."""
    if beta <= 0:
        raise ContractError("smooth_l1_vs: beta must be positive")
    target = np.asarray(target, dtype=pred.data.dtype)
    if target.shape != pred.shape:
        raise ShapeError(f"smooth_l1_vs: shapes {pred.shape} vs {target.shape}")
    x = pred.data - target
    ax = np.abs(x)
    out = np.where(ax < beta, 0.5 * x * x / beta, ax - 0.5 * beta)

    def bwd(g, pred=pred, x=x, ax=ax, beta=beta):
        pred._accumulate(g * np.where(ax < beta, x / beta, np.sign(x)))
    return _make(out.astype(pred.data.dtype), (pred,), bwd)


# ---------------------------------------------------------------------------
# backward pass and gradient verification


def backward(loss, tape):
    """Reverse sweep over the tape; accumulates gradients in creation order."""
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._bwd is None and loss not in tape.nodes:
        raise ContractError("backward: loss does not belong to the given tape")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.grad is not None and node._bwd is not None:
            node._bwd(node.grad)


def finite_diff_check(f, params, h=1e-5, max_coords_per_tensor=None, rng=None):
    """Worst relative error between analytic gradients and central differences.

    `f` evaluates the scalar loss from the current parameter values and must
    be side-effect free. Analytic gradients are read from each parameter's
    grad buffer (computed by the caller beforehand). When
    `max_coords_per_tensor` is set, a seeded subset of coordinates is probed
    in every tensor; otherwise every coordinate is checked.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for p in params:
        if p.grad is None:
            raise ContractError(f"finite_diff_check: missing gradient for {p.name or p!r}")
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords_per_tensor is not None and flat.size > max_coords_per_tensor:
            idx = rng.choice(flat.size, size=max_coords_per_tensor, replace=False)
        for i in idx:
            orig = flat[i]
            step = h * max(1.0, abs(orig))
            flat[i] = orig + step
            fp = f()
            flat[i] = orig - step
            fm = f()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * step)
            analytic = float(gflat[i])
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst
