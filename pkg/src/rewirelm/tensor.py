"""Dense tensors with tape-based reverse-mode automatic differentiation.

Arrays are row-major numpy, float32 by default.  Operations executed while a
Tape is active are recorded in execution order; backward() replays the tape
in exact reverse order and accumulates gradients into leaf tensors that have
requires_grad set.  Tensors built from float64 arrays propagate float64
through every op, which is what the finite-difference tests rely on.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import NumericError, PreconditionError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_active_tape = None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "tape")

    def __init__(self, data, requires_grad=False, dtype=np.float32):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self.tape = None  # set when produced by a recorded op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def detach(self):
        """Same data, no history, no grad flag."""
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flags = []
        if self.requires_grad:
            flags.append("requires_grad")
        if self.tape is not None:
            flags.append("on_tape")
        tag = ", ".join([str(self.data.shape)] + flags)
        return f"Tensor({tag})"


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Records every op run inside its context, in execution order.

    Only one tape can be active at a time; nesting raises.  Ops run with no
    active tape (evaluation) are not recorded and carry no history.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        global _active_tape
        if _active_tape is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = None
        return False


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t.tape is not None


def _record(out: Tensor, inputs, backward_fn) -> Tensor:
    tape = _active_tape
    if tape is not None and any(_tracked(t) for t in inputs):
        out.tape = tape
        tape.nodes.append(_Node(inputs, out, backward_fn))
    return out


def _raw(arr) -> Tensor:
    """Wrap an ndarray without dtype coercion."""
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.grad = None
    t.requires_grad = False
    t.tape = None
    return t


def backward(loss: Tensor):
    """Reverse sweep from a scalar loss.

    Walks the recorded tape in reverse execution order, routing each node's
    output gradient to its inputs.  Gradients accumulate into `.grad` of
    every reachable leaf with requires_grad; repeated calls keep
    accumulating until the caller zeroes the grads.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    tape = loss.tape
    if tape is None:
        return  # constant loss: nothing reachable, all grads are zero
    grads = {id(loss): np.ones((), dtype=loss.data.dtype)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        contribs = node.backward_fn(g)
        for t, gt in zip(node.inputs, contribs):
            if gt is None:
                continue
            if t.requires_grad:
                # first contribution copies: gt may alias a pass-through buffer
                if t.grad is None:
                    t.grad = np.array(gt, copy=True)
                else:
                    t.grad += gt
            elif t.tape is not None:
                acc = grads.get(id(t))
                # never += into stored arrays: they may be shared pass-throughs
                grads[id(t)] = gt if acc is None else acc + gt


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product [m,k] @ [k,n] -> [m,n]."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.data.shape} and {b.data.shape} do not compose")
    ad, bd = a.data, b.data
    out = _raw(ad @ bd)
    na, nb = _tracked(a), _tracked(b)  # skip grads nobody will consume

    def bwd(g):
        return (g @ bd.T if na else None), (ad.T @ g if nb else None)

    return _record(out, (a, b), bwd)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over matching leading dims: [..., m, k] @ [..., k, n]."""
    ad, bd = a.data, b.data
    if ad.ndim < 3 or bd.ndim < 3 or ad.shape[:-2] != bd.shape[:-2] or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"bmm: shapes {ad.shape} and {bd.shape} do not compose")
    out = _raw(np.matmul(ad, bd))
    na, nb = _tracked(a), _tracked(b)

    def bwd(g):
        ga = np.matmul(g, bd.swapaxes(-1, -2)) if na else None
        gb = np.matmul(ad.swapaxes(-1, -2), g) if nb else None
        return ga, gb

    return _record(out, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape} differ")
    out = _raw(a.data + b.data)

    def bwd(g):
        return g, g

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shapes {a.data.shape} and {b.data.shape} differ")
    ad, bd = a.data, b.data
    out = _raw(ad * bd)

    def bwd(g):
        return g * bd, g * ad

    return _record(out, (a, b), bwd)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a 1-D bias along the last axis."""
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"add_bias: bias {b.data.shape} does not fit {x.data.shape}")
    out = _raw(x.data + b.data)
    lead = tuple(range(x.data.ndim - 1))
    nb = _tracked(b)

    def bwd(g):
        gb = (g.sum(axis=lead) if lead else g) if nb else None
        return g, gb

    return _record(out, (x, b), bwd)


def add_const(x: Tensor, c) -> Tensor:
    """Add a constant array (no gradient through c); broadcasting allowed
    as long as the output keeps x's shape."""
    c = np.asarray(c, dtype=x.data.dtype)
    out_data = x.data + c
    if out_data.shape != x.data.shape:
        raise ShapeError(f"add_const: constant {c.shape} would broadcast {x.data.shape} to {out_data.shape}")
    out = _raw(out_data)

    def bwd(g):
        return (g,)

    return _record(out, (x,), bwd)


def mul_const(x: Tensor, c) -> Tensor:
    """Multiply by a constant scalar or array (no gradient through c)."""
    c = np.asarray(c, dtype=x.data.dtype)
    out_data = x.data * c
    if out_data.shape != x.data.shape:
        raise ShapeError(f"mul_const: constant {c.shape} would broadcast {x.data.shape} to {out_data.shape}")
    out = _raw(out_data)

    def bwd(g):
        return (g * c,)

    return _record(out, (x,), bwd)


def scale(x: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar."""
    s = float(s)
    out = _raw(x.data * x.data.dtype.type(s))

    def bwd(g):
        return (g * g.dtype.type(s),)

    return _record(out, (x,), bwd)


# Abramowitz & Stegun 7.1.26 rational approximation of erf; max absolute
# error 1.5e-7, i.e. within ~2 ulp of float32 for |erf| near 1.  Used only on
# the float32 path, where scipy's scalar-looped erf would dominate step time;
# float64 inputs (the precision reference used by the gradient oracles) keep
# the exact library routine.
_ERF_A = (0.254829592, -0.284496736, 1.421413741, -1.453152027, 1.061405429)
_ERF_P = 0.3275911


def _erf_f32(x):
    a1, a2, a3, a4, a5 = _ERF_A
    ax = np.abs(x)
    t = ax * _ERF_P
    t += 1.0
    np.reciprocal(t, out=t)
    poly = t * a5
    poly += a4
    poly *= t
    poly += a3
    poly *= t
    poly += a2
    poly *= t
    poly += a1
    poly *= t
    e = ax * ax
    np.negative(e, out=e)
    np.exp(e, out=e)
    poly *= e
    np.subtract(1.0, poly, out=poly)
    return np.copysign(poly, x)


def gelu(x: Tensor) -> Tensor:
    """Erf-form GELU: x * Phi(x)."""
    xd = x.data
    if xd.dtype == np.float32:
        cdf = _erf_f32(xd * np.float32(_INV_SQRT2))
        cdf += 1.0
        cdf *= 0.5
    else:
        cdf = 0.5 * (1.0 + erf(xd * xd.dtype.type(_INV_SQRT2)))
    out = _raw(xd * cdf)

    def bwd(g):
        pdf = np.exp(xd * xd * -0.5)
        pdf *= xd.dtype.type(_INV_SQRT2PI)
        pdf *= xd
        pdf += cdf
        pdf *= g
        return (pdf,)

    return _record(out, (x,), bwd)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by row-max subtraction."""
    xd = x.data
    if xd.ndim < 1 or xd.shape[-1] == 0:
        raise ShapeError(f"softmax_rows: needs a non-empty last axis, got {xd.shape}")
    m = xd.max(axis=-1, keepdims=True)
    if np.isnan(m).any():  # any NaN in x surfaces in its row max
        raise NumericError("softmax_rows: input contains NaN")
    e = xd - m
    np.exp(e, out=e)
    e /= e.sum(axis=-1, keepdims=True)
    out_data = e
    out = _raw(out_data)

    def bwd(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        dx = g - dot
        dx *= out_data
        return (dx,)

    return _record(out, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    xd = x.data
    d = xd.shape[-1] if xd.ndim else 0
    if d == 0:
        raise ShapeError("layer_norm: last axis has zero width")
    if d < 2:
        raise PreconditionError("layer_norm: needs at least 2 features")
    if eps <= 0:
        raise PreconditionError("layer_norm: eps must be positive")
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain {gain.data.shape} / bias {bias.data.shape} do not fit width {d}"
        )
    mu = xd.mean(axis=-1, keepdims=True)
    xhat = xd - mu
    var = (xhat * xhat).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat *= inv
    out_data = xhat * gain.data
    out_data += bias.data
    out = _raw(out_data)
    lead = tuple(range(xd.ndim - 1))
    gd = gain.data
    nx, ng, nb = _tracked(x), _tracked(gain), _tracked(bias)

    def bwd(g):
        dx = None
        if nx:
            dxhat = g * gd
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            dxhat -= m1
            dxhat -= xhat * m2
            dxhat *= inv
            dx = dxhat
        dgain = ((g * xhat).sum(axis=lead) if lead else g * xhat) if ng else None
        dbias = ((g.sum(axis=lead) if lead else g)) if nb else None
        return dx, dgain, dbias

    return _record(out, (x, gain, bias), bwd)


def cross_entropy_masked(logits: Tensor, targets, mask) -> Tensor:
    """Mean cross-entropy over the masked rows of [t, V] logits.

    targets: int ids, length t.  mask: booleans, length t; rows where mask
    is False contribute nothing.  Log-sum-exp is max-shifted for stability.
    """
    ld = logits.data
    if ld.ndim != 2:
        raise ShapeError(f"cross_entropy_masked: logits must be 2-D, got {ld.shape}")
    t = ld.shape[0]
    targets = np.asarray(targets, dtype=np.int64)
    mask_arr = np.asarray(mask, dtype=bool)
    if targets.shape != (t,) or mask_arr.shape != (t,):
        raise ShapeError(
            f"cross_entropy_masked: targets {targets.shape} / mask {mask_arr.shape} do not match {t} rows"
        )
    rows = np.flatnonzero(mask_arr)
    if rows.size == 0:
        raise PreconditionError("cross_entropy_masked: mask selects no rows")
    sub = ld[rows]
    tgt = targets[rows]
    m = sub.max(axis=-1, keepdims=True)
    e = np.exp(sub - m)
    z = e.sum(axis=-1, keepdims=True)
    lse = m + np.log(z)
    picked = sub[np.arange(rows.size), tgt]
    loss = (lse.ravel() - picked).mean()
    out = _raw(np.asarray(loss, dtype=ld.dtype))
    n = rows.size

    def bwd(g):
        p = e / z
        p[np.arange(n), tgt] -= 1.0
        dl = np.zeros_like(ld)
        dl[rows] = p * (g / ld.dtype.type(n))
        return (dl,)

    return _record(out, (logits,), bwd)


def gather_rows(x: Tensor, ids) -> Tensor:
    """Select rows x[ids] along axis 0 (embedding lookup / pooling)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"gather_rows: ids must be 1-D, got {ids.shape}")
    xd = x.data
    out = _raw(xd[ids])
    nx = _tracked(x)

    def bwd(g):
        if not nx:
            return (None,)
        dx = np.zeros_like(xd)
        if xd.ndim == 2:
            # per-column bincount beats np.add.at's buffered fancy indexing
            n_rows = xd.shape[0]
            for j in range(xd.shape[1]):
                dx[:, j] = np.bincount(ids, weights=g[:, j], minlength=n_rows)
        else:
            np.add.at(dx, ids, g)
        return (dx,)

    return _record(out, (x,), bwd)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row slice x[start:stop] along axis 0."""
    n = x.data.shape[0]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for {n} rows")
    xd = x.data
    out = _raw(xd[start:stop])

    def bwd(g):
        dx = np.zeros_like(xd)
        dx[start:stop] = g
        return (dx,)

    return _record(out, (x,), bwd)


def transpose(x: Tensor) -> Tensor:
    """2-D transpose."""
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: needs a 2-D tensor, got {x.data.shape}")
    out = _raw(x.data.T)

    def bwd(g):
        return (g.T,)

    return _record(out, (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.data.shape
    out = _raw(x.data.reshape(shape))

    def bwd(g):
        return (g.reshape(orig),)

    return _record(out, (x,), bwd)


def permute(x: Tensor, axes) -> Tensor:
    """Axis permutation (generalized transpose)."""
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"permute: axes {axes} are not a permutation for {x.data.shape}")
    inv = tuple(np.argsort(axes))
    out = _raw(x.data.transpose(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return _record(out, (x,), bwd)


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements -> scalar."""
    xd = x.data
    out = _raw(np.asarray(xd.sum(), dtype=xd.dtype))

    def bwd(g):
        return (np.full(xd.shape, g, dtype=xd.dtype),)

    return _record(out, (x,), bwd)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with prob p, scale survivors by 1/(1-p).

    Identity when p == 0.  Evaluation paths simply do not call this.
    """
    if not 0.0 <= p < 1.0:
        raise PreconditionError(f"dropout: p must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    draw_dtype = np.float32 if x.data.dtype == np.float32 else np.float64
    keep = (rng.random(x.data.shape, dtype=draw_dtype) >= p).astype(x.data.dtype)
    keep *= x.data.dtype.type(1.0 / (1.0 - p))
    return mul_const(x, keep)
