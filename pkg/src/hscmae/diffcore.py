"""Minimal reverse-mode autodiff over dense 2-D float64 matrices.

Provides exactly the primitives the model and losses need. Every primitive
records a closure computing its analytic input gradients; ``backward`` walks
the tape from a scalar loss and accumulates into reachable ``Parameter``
objects. A tape is rebuilt on every forward pass and is single-threaded.
"""

from __future__ import annotations

import numpy as np


class DiffError(Exception):
    """Base class for engine failures."""


class ShapeError(DiffError):
    pass


class NumericError(DiffError):
    pass


def _check_finite(op, value):
    if not np.all(np.isfinite(value)):
        raise NumericError(f"{op}: non-finite forward value")


class Tensor:
    """A 2-D float64 matrix plus tape bookkeeping."""

    __slots__ = ("value", "grad", "op", "_parents", "_backward", "param")

    def __init__(self, value, op="const", parents=(), backward=None, param=None):
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"{op}: expected a 2-D matrix, got shape {arr.shape}")
        self.value = arr
        self.grad = None
        self.op = op
        self._parents = parents
        self._backward = backward
        self.param = param

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"<Tensor {self.op} {self.shape}>"


def const(value, op="const"):
    return Tensor(value, op=op)


class Parameter:
    """Learnable matrix with a gradient accumulator and Adam moments."""

    __slots__ = ("name", "value", "grad", "adam_m", "adam_v", "decay")

    def __init__(self, value, name="", decay=True):
        arr = np.array(value, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"parameter {name!r}: expected 2-D, got {arr.shape}")
        self.name = name
        self.value = arr
        self.grad = np.zeros_like(arr)
        self.adam_m = np.zeros_like(arr)
        self.adam_v = np.zeros_like(arr)
        self.decay = decay

    def tensor(self):
        """Wrap the current value as a tape leaf tied to this parameter."""
        return Tensor(self.value, op="param", param=self)

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"<Parameter {self.name!r} {self.value.shape}>"


def _node(op, value, parents, backward):
    value = np.asarray(value, dtype=np.float64)
    _check_finite(op, value)
    return Tensor(value, op=op, parents=tuple(parents), backward=backward)


def backward(loss):
    """Reverse pass from a scalar loss.

    Sets ``.grad`` on every tape node reachable from ``loss`` (overwriting
    previous per-node grads) and *accumulates* into each reachable
    ``Parameter.grad``. Returns the node-grad map keyed by node id.
    """
    if loss.shape != (1, 1):
        raise ShapeError(f"backward: root must be 1x1, got {loss.shape}")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones((1, 1))}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            # Reachable only through a severed edge (stop-gradient).
            node.grad = np.zeros_like(node.value)
            continue
        node.grad = g
        if node.param is not None:
            node.param.grad += g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    return grads


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a, b):
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    av, bv = a.value, b.value

    def bwd(g):
        return g @ bv.T, av.T @ g

    return _node("matmul", av @ bv, (a, b), bwd)


def transpose(a):
    def bwd(g):
        return (g.T,)

    return _node("transpose", a.value.T, (a,), bwd)


def add(a, b):
    """Elementwise add; ``b`` may be a 1 x cols bias row broadcast over rows."""
    if a.shape == b.shape:
        def bwd(g):
            return g, g
    elif b.shape == (1, a.shape[1]):
        def bwd(g):
            return g, g.sum(axis=0, keepdims=True)
    else:
        raise ShapeError(f"add: {a.shape} + {b.shape}")
    return _node("add", a.value + b.value, (a, b), bwd)


def scale(a, c):
    c = float(c)

    def bwd(g):
        return (g * c,)

    return _node("scale", a.value * c, (a,), bwd)


def mul(a, b):
    """Elementwise product; either operand may be 1x1 (scalar broadcast)."""
    av, bv = a.value, b.value
    if a.shape == b.shape:
        def bwd(g):
            return g * bv, g * av
    elif a.shape == (1, 1):
        def bwd(g):
            return np.sum(g * bv, keepdims=True).reshape(1, 1), g * av[0, 0]
    elif b.shape == (1, 1):
        def bwd(g):
            return g * bv[0, 0], np.sum(g * av, keepdims=True).reshape(1, 1)
    else:
        raise ShapeError(f"mul: {a.shape} * {b.shape}")
    return _node("mul", av * bv, (a, b), bwd)


def tanh(a):
    y = np.tanh(a.value)

    def bwd(g):
        return (g * (1.0 - y * y),)

    return _node("tanh", y, (a,), bwd)


def exp(a):
    y = np.exp(a.value)

    def bwd(g):
        return (g * y,)

    return _node("exp", y, (a,), bwd)


def row_softmax(a, temp=1.0):
    if temp <= 0:
        raise ValueError("row_softmax: temperature must be positive")
    z = a.value / temp
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        inner = (g * y).sum(axis=1, keepdims=True)
        return ((y * (g - inner)) / temp,)

    return _node("row_softmax", y, (a,), bwd)


def row_log_softmax(a, temp=1.0):
    if temp <= 0:
        raise ValueError("row_log_softmax: temperature must be positive")
    z = a.value / temp
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    y = z - lse
    sm = np.exp(y)

    def bwd(g):
        return ((g - sm * g.sum(axis=1, keepdims=True)) / temp,)

    return _node("row_log_softmax", y, (a,), bwd)


_NORM_EPS = 1e-5


def batch_norm(x, gamma, beta, running_mean, running_var, train, update_stats=True, momentum=0.1):
    """Batch normalization over the row (sample) axis.

    ``running_mean``/``running_var`` are plain 1 x d arrays mutated in place
    when ``train and update_stats``; eval mode normalizes with them.
    """
    d = x.shape[1]
    if gamma.shape != (1, d) or beta.shape != (1, d):
        raise ShapeError(f"batch_norm: affine shapes {gamma.shape}/{beta.shape} vs d={d}")
    if train:
        n = x.shape[0]
        if n < 2:
            raise ShapeError("batch_norm: train mode needs at least 2 samples")
        mu = x.value.mean(axis=0, keepdims=True)
        var = x.value.var(axis=0, keepdims=True)
        if update_stats:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * var
        inv = 1.0 / np.sqrt(var + _NORM_EPS)
        xhat = (x.value - mu) * inv
        y = gamma.value * xhat + beta.value

        def bwd(g):
            dxhat = g * gamma.value
            dx = inv / n * (n * dxhat
                            - dxhat.sum(axis=0, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=0, keepdims=True))
            return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)
    else:
        inv = 1.0 / np.sqrt(running_var + _NORM_EPS)
        xhat = (x.value - running_mean) * inv
        y = gamma.value * xhat + beta.value

        def bwd(g):
            return g * gamma.value * inv, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _node("batch_norm", y, (x, gamma, beta), bwd)


def layer_norm(x, gamma, beta):
    """Per-row normalization with affine parameters (1 x d)."""
    d = x.shape[1]
    if gamma.shape != (1, d) or beta.shape != (1, d):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs d={d}")
    mu = x.value.mean(axis=1, keepdims=True)
    var = x.value.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _NORM_EPS)
    xhat = (x.value - mu) * inv
    y = gamma.value * xhat + beta.value

    def bwd(g):
        dxhat = g * gamma.value
        dx = inv / d * (d * dxhat
                        - dxhat.sum(axis=1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _node("layer_norm", y, (x, gamma, beta), bwd)


def dropout(x, rate, train, rng):
    """Inverted dropout: survivors scaled by 1/(1-rate) so eval is identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate {rate} outside [0, 1)")
    if not train or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def bwd(g):
        return (g * keep,)

    return _node("dropout", x.value * keep, (x,), bwd)


def mse(a, b):
    """Mean over rows of the squared L2 row difference."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: {a.shape} vs {b.shape}")
    n = a.shape[0]
    diff = a.value - b.value

    def bwd(g):
        d = g[0, 0] * 2.0 / n * diff
        return d, -d

    return _node("mse", [[float((diff * diff).sum() / n)]], (a, b), bwd)


def cosine_rows(a, b):
    """Per-row cosine similarity, returned as an n x 1 column."""
    if a.shape != b.shape:
        raise ShapeError(f"cosine_rows: {a.shape} vs {b.shape}")
    na = np.maximum(np.linalg.norm(a.value, axis=1, keepdims=True), 1e-12)
    nb = np.maximum(np.linalg.norm(b.value, axis=1, keepdims=True), 1e-12)
    ua, ub = a.value / na, b.value / nb
    y = (ua * ub).sum(axis=1, keepdims=True)

    def bwd(g):
        ga = g * (ub - y * ua) / na
        gb = g * (ua - y * ub) / nb
        return ga, gb

    return _node("cosine_rows", y, (a, b), bwd)


def l2_normalize_rows(a, zero_tol=1e-12):
    """Rows scaled to unit L2 norm; rows with norm < zero_tol map to zeros."""
    norms = np.linalg.norm(a.value, axis=1, keepdims=True)
    live = norms >= zero_tol
    safe = np.where(live, norms, 1.0)
    y = np.where(live, a.value / safe, 0.0)

    def bwd(g):
        inner = (g * y).sum(axis=1, keepdims=True)
        return (np.where(live, (g - y * inner) / safe, 0.0),)

    return _node("l2_normalize_rows", y, (a,), bwd)


def concat_cols(a, b):
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols: {a.shape} | {b.shape}")
    ca = a.shape[1]

    def bwd(g):
        return g[:, :ca], g[:, ca:]

    return _node("concat_cols", np.hstack([a.value, b.value]), (a, b), bwd)


def slice_cols(a, start, stop):
    if not 0 <= start < stop <= a.shape[1]:
        raise ShapeError(f"slice_cols: [{start}:{stop}] of {a.shape}")

    def bwd(g):
        out = np.zeros(a.shape)
        out[:, start:stop] = g
        return (out,)

    return _node("slice_cols", a.value[:, start:stop], (a,), bwd)


def elementwise_mask(a, mask):
    """Multiply forward and backward by a constant 0/1 matrix."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != a.shape:
        raise ShapeError(f"elementwise_mask: {a.shape} vs mask {mask.shape}")

    def bwd(g):
        return (g * mask,)

    return _node("elementwise_mask", a.value * mask, (a,), bwd)


def stop_gradient(a):
    """Identity forward, zero backward."""
    return _node("stop_gradient", a.value.copy(), (a,), lambda g: (None,))


def gradient_gate(a, gate):
    """Identity forward; backward multiplies the incoming gradient by ``gate``."""
    gate = np.asarray(gate, dtype=np.float64)
    if gate.shape != a.shape:
        raise ShapeError(f"gradient_gate: {a.shape} vs gate {gate.shape}")

    def bwd(g):
        return (g * gate,)

    return _node("gradient_gate", a.value, (a,), bwd)


def sum_all(a):
    def bwd(g):
        return (np.full(a.shape, g[0, 0]),)

    return _node("sum_all", [[float(a.value.sum())]], (a,), bwd)


def mean_all(a):
    size = a.value.size

    def bwd(g):
        return (np.full(a.shape, g[0, 0] / size),)

    return _node("mean_all", [[float(a.value.mean())]], (a,), bwd)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def grad_check(fn, params, step=1e-5, max_coords=5, seed=0):
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must be a deterministic zero-argument callable returning a scalar
    Tensor built from the given parameters. Up to ``max_coords`` coordinates
    per parameter are sampled.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    for p in params:
        p.zero_grad()
    backward(fn())
    analytic = {id(p): p.grad.copy() for p in params}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        size = p.value.size
        coords = np.arange(size) if size <= max_coords else rng.choice(size, max_coords, replace=False)
        flat = p.value.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            up = fn().value[0, 0]
            flat[c] = orig - step
            down = fn().value[0, 0]
            flat[c] = orig
            fd = (up - down) / (2.0 * step)
            a = analytic[id(p)].reshape(-1)[c]
            err = abs(a - fd) / max(1e-8, abs(fd))
            worst = max(worst, err)
    return worst
