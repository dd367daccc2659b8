"""A small reverse-mode autodiff engine over float64 numpy arrays.

Tensors record the op that produced them; ``backward()`` on a scalar walks
the recorded graph in reverse topological order, so each op's backward rule
runs exactly once and gradients accumulate additively across fan-out.

Shapes are explicit: elementwise ops require equal shapes, and the only
implicit broadcast is tensor * python scalar. Ops that combine a batch with
a per-row quantity are separate named functions (``mul_rows``, ``linear``,
``bdot``, ``wsum``).
"""

from __future__ import annotations

import contextlib

import numpy as np

_recording = True


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording them for backward."""
    global _recording
    prev = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = prev


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar for the common same-shape cases
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _result(data, parents, backward, op):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    needs = _recording and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (),
                  _backward=backward if needs else None, op=op)


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ---------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)

    def backward(g):
        _accum(a, g)
        _accum(b, g)
    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)

    def backward(g):
        _accum(a, g)
        _accum(b, -g)
    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)
    return _result(a.data * b.data, (a, b), backward, "mul")


def scale(a, s: float):
    a = as_tensor(a)
    s = float(s)
    return _result(a.data * s, (a,), lambda g: _accum(a, g * s), "scale")


def mul_rows(x, s):
    """Multiply each row x[..., :] by the scalar s[...]; s.shape == x.shape[:-1]."""
    x, s = as_tensor(x), as_tensor(s)
    if s.shape != x.shape[:-1]:
        raise ShapeError(f"mul_rows: row scales {s.shape} do not match rows of {x.shape}")

    def backward(g):
        _accum(x, g * s.data[..., None])
        if s.requires_grad:
            _accum(s, np.sum(g * x.data, axis=-1))
    return _result(x.data * s.data[..., None], (x, s), backward, "mul_rows")


def relu(x):
    x = as_tensor(x)
    on = x.data > 0
    return _result(np.where(on, x.data, 0.0), (x,), lambda g: _accum(x, g * on), "relu")


def sigmoid(x):
    x = as_tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(y, (x,), lambda g: _accum(x, g * y * (1.0 - y)), "sigmoid")


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: _accum(x, g * (1.0 - y * y)), "tanh")


def log_sigmoid(x):
    """log(sigmoid(x)), stable for large |x|."""
    x = as_tensor(x)
    y = -np.logaddexp(0.0, -x.data)
    sig_neg = 0.5 * (1.0 - np.tanh(0.5 * x.data))
    return _result(y, (x,), lambda g: _accum(x, g * sig_neg), "log_sigmoid")


# -- reductions ----------------------------------------------------------

def sum_all(x):
    x = as_tensor(x)
    return _result(np.sum(x.data), (x,), lambda g: _accum(x, np.full(x.shape, float(g))), "sum")


def mean(x):
    x = as_tensor(x)
    n = x.data.size
    return _result(np.mean(x.data), (x,), lambda g: _accum(x, np.full(x.shape, float(g) / n)), "mean")


def sum_squares(x):
    x = as_tensor(x)
    return _result(np.sum(x.data * x.data), (x,), lambda g: _accum(x, 2.0 * float(g) * x.data), "sum_squares")


# -- structure -----------------------------------------------------------

def concat(parts, axis=-1):
    parts = [as_tensor(p) for p in parts]
    if len(parts) == 0:
        raise ShapeError("concat: nothing to concatenate")
    nd = parts[0].data.ndim
    ax = axis % nd
    for p in parts[1:]:
        if p.data.ndim != nd or p.shape[:ax] + p.shape[ax + 1:] != parts[0].shape[:ax] + parts[0].shape[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {[q.shape for q in parts]} along axis {axis}")
    sizes = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def backward(g):
        for p, piece in zip(parts, np.split(g, sizes, axis=ax)):
            _accum(p, piece)
    return _result(np.concatenate([p.data for p in parts], axis=ax), tuple(parts), backward, "concat")


def reshape(x, shape):
    x = as_tensor(x)
    return _result(x.data.reshape(shape), (x,), lambda g: _accum(x, g.reshape(x.shape)), "reshape")


def transpose(x):
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got {x.shape}")
    return _result(x.data.T, (x,), lambda g: _accum(x, g.T), "transpose")


def take_rows(x, index):
    """x[index] for an integer index array over the first axis."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        _accum(x, full)
    return _result(x.data[index], (x,), backward, "take_rows")


def where_rows(cond, a, b):
    """Row-wise select: a[r] where cond[r] else b[r]."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("where_rows", a, b)
    cond = np.asarray(cond, dtype=bool)
    if cond.shape != a.shape[:-1]:
        raise ShapeError(f"where_rows: condition {cond.shape} does not match rows of {a.shape}")
    c = cond[..., None]

    def backward(g):
        _accum(a, np.where(c, g, 0.0))
        _accum(b, np.where(c, 0.0, g))
    return _result(np.where(c, a.data, b.data), (a, b), backward, "where_rows")


# -- linear algebra ------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)
    return _result(ordered_matmul(a.data, b.data), (a, b), backward, "matmul")


def ordered_matmul(a, b):
    """a @ b summed strictly left to right over the inner index.

    BLAS kernels reorder and fuse the inner sum, so their low bits depend on
    the build; this loop reproduces the textbook sum exactly.
    """
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k, None] * b[None, k, :]
    return out


def linear(x, w, b=None):
    """x @ w.T (+ b per row); x is (n, in), w is (out, in), b is (out,)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    out = x.data @ w.data.T
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
        out = out + b.data
        parents = (x, w, b)

    def backward(g):
        _accum(x, g @ w.data)
        _accum(w, g.T @ x.data)
        if b is not None:
            _accum(b, g.sum(axis=0))
    return _result(out, parents, backward, "linear")


def bdot(rows, a):
    """Per-batch dot products: rows (B, M, D), a (B, D) -> (B, M)."""
    rows, a = as_tensor(rows), as_tensor(a)
    if rows.data.ndim != 3 or a.data.ndim != 2 or rows.shape[0] != a.shape[0] or rows.shape[2] != a.shape[1]:
        raise ShapeError(f"bdot: rows {rows.shape} incompatible with {a.shape}")

    def backward(g):
        _accum(rows, g[:, :, None] * a.data[:, None, :])
        if a.requires_grad:
            _accum(a, np.einsum("bm,bmd->bd", g, rows.data))
    return _result(np.einsum("bmd,bd->bm", rows.data, a.data), (rows, a), backward, "bdot")


def wsum(w, rows):
    """Per-batch weighted row sums: w (B, M), rows (B, M, D) -> (B, D)."""
    w, rows = as_tensor(w), as_tensor(rows)
    if rows.data.ndim != 3 or w.shape != rows.shape[:2]:
        raise ShapeError(f"wsum: weights {w.shape} incompatible with rows {rows.shape}")

    def backward(g):
        if w.requires_grad:
            _accum(w, np.einsum("bd,bmd->bm", g, rows.data))
        _accum(rows, w.data[:, :, None] * g[:, None, :])
    return _result(np.einsum("bm,bmd->bd", w.data, rows.data), (w, rows), backward, "wsum")


def softmax(x, mask=None):
    """Softmax over the last axis, max-shifted. Masked-out entries get weight 0.

    Rows with an all-false mask produce all zeros.
    """
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != z.shape:
            raise ShapeError(f"softmax: mask {mask.shape} does not match {z.shape}")
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=-1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    denom = e.sum(axis=-1, keepdims=True)
    y = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)

    def backward(g):
        _accum(x, y * (g - np.sum(g * y, axis=-1, keepdims=True)))
    return _result(y, (x,), backward, "softmax")


def time_encoding(dt, omega, bias):
    """cos(omega * |dt| + bias) with dt a constant array; output dt.shape + (c_t,)."""
    omega, bias = as_tensor(omega), as_tensor(bias)
    if omega.data.ndim != 1 or omega.shape != bias.shape:
        raise ShapeError(f"time_encoding: omega {omega.shape} and bias {bias.shape} must be equal-length vectors")
    dt = np.abs(np.asarray(dt, dtype=np.float64))
    arg = dt[..., None] * omega.data + bias.data
    out = np.cos(arg)

    def backward(g):
        gs = -g * np.sin(arg)
        flat = gs.reshape(-1, gs.shape[-1])
        if omega.requires_grad:
            _accum(omega, dt.reshape(-1) @ flat)
        if bias.requires_grad:
            _accum(bias, flat.sum(axis=0))
    return _result(out, (omega, bias), backward, "time_encoding")


# -- gradient checking -----------------------------------------------------

def grad_check(f, params, eps=1e-6):
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps the list of parameter tensors to a scalar Tensor. Relative error
    per coordinate uses denominator max(|analytic|, |numeric|, 1e-8).
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    for p in params:
        p.grad = None
        p.requires_grad = True
    out = f(params)
    if not np.isfinite(out.data).all():
        raise NonFiniteError("function value is not finite")
    out.backward()
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            fp = float(f(params).data)
            flat[k] = orig - eps
            fm = float(f(params).data)
            flat[k] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError("function value is not finite under perturbation")
            num = (fp - fm) / (2.0 * eps)
            ana = float(analytic.reshape(-1)[k])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
