"""Minimal dense-tensor kernel with reverse-mode differentiation.

Just enough operator coverage for a two-layer attention LSTM decoder:
elementwise arithmetic with numpy-style broadcasting, matmul for 1-D/2-D
operands, concat, softmax/log-softmax, a fused LSTM cell, and scalar
reductions. Operations executed inside a ``with Tape():`` block are recorded
in execution order; one reverse sweep accumulates (sums) gradients into every
tensor created with ``requires_grad=True``.

Tensors default to double precision so that central finite differences are a
meaningful oracle; ``float32`` is accepted for faster training runs. A Tape
and the tensors recorded on it belong to a single thread; independent tapes
may run concurrently.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NumericError, ShapeError

_STACK = threading.local()

# Finite-value validation on every tensor construction. Cheap at desk scale;
# flip off only for throwaway speed experiments.
FINITE_CHECKS = True


def _active_tape():
    stack = getattr(_STACK, "tapes", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of recorded operations for one forward pass."""

    __slots__ = ("_ops",)

    def __init__(self):
        self._ops = []

    def __len__(self):
        return len(self._ops)

    def __enter__(self):
        stack = getattr(_STACK, "tapes", None)
        if stack is None:
            stack = _STACK.tapes = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _STACK.tapes.pop()
        return False

    def backward(self, loss, seed=1.0):
        """Reverse sweep from a scalar output, summing into leaf ``.grad``s."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        loss.grad = np.full_like(loss.data, seed)
        for fn in reversed(self._ops):
            fn()


class Tensor:
    """A dense array with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if FINITE_CHECKS and not np.isfinite(arr).all():
            raise NumericError("tensor contains non-finite values")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data.copy()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Convenience arithmetic; scalars are promoted to constant tensors.
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, self))


def _as_tensor(value, like):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data, *inputs):
    """Wrap an op output; returns (tensor, tape_or_None_if_not_recording)."""
    tape = _active_tape()
    track = tape is not None and any(i.requires_grad for i in inputs)
    out = Tensor(data, requires_grad=track)
    return out, (tape if track else None)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, (g, s) in enumerate(zip(grad.shape, shape)):
        if s == 1 and g != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    out, tape = _make(a.data + b.data, a, b)
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            _accum(a, _unbroadcast(out.grad, a.data.shape))
            _accum(b, _unbroadcast(out.grad, b.data.shape))
        tape._ops.append(backward)
    return out


def sub(a, b):
    out, tape = _make(a.data - b.data, a, b)
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            _accum(a, _unbroadcast(out.grad, a.data.shape))
            _accum(b, _unbroadcast(-out.grad, b.data.shape))
        tape._ops.append(backward)
    return out


def mul(a, b):
    out, tape = _make(a.data * b.data, a, b)
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            _accum(a, _unbroadcast(out.grad * b.data, a.data.shape))
            _accum(b, _unbroadcast(out.grad * a.data, b.data.shape))
        tape._ops.append(backward)
    return out


def div(a, b):
    out, tape = _make(a.data / b.data, a, b)
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            _accum(a, _unbroadcast(out.grad / b.data, a.data.shape))
            _accum(b, _unbroadcast(-out.grad * a.data / (b.data * b.data), b.data.shape))
        tape._ops.append(backward)
    return out


def tanh(x):
    y = np.tanh(x.data)
    out, tape = _make(y, x)
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            _accum(x, out.grad * (1.0 - y * y))
        tape._ops.append(backward)
    return out


def sigmoid(x):
    y = 1.0 / (1.0 + np.exp(-x.data))
    out, tape = _make(y, x)
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            _accum(x, out.grad * y * (1.0 - y))
        tape._ops.append(backward)
    return out


def log(x):
    out, tape = _make(np.log(x.data), x)
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            _accum(x, out.grad / x.data)
        tape._ops.append(backward)
    return out


def exp(x):
    y = np.exp(x.data)
    out, tape = _make(y, x)
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            _accum(x, out.grad * y)
        tape._ops.append(backward)
    return out


def clip(x, lo, hi):
    """Clamp values to [lo, hi]; gradient is zero where the clamp binds."""
    inside = (x.data >= lo) & (x.data <= hi)
    out, tape = _make(np.clip(x.data, lo, hi), x)
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            _accum(x, out.grad * inside)
        tape._ops.append(backward)
    return out


# ---------------------------------------------------------------------------
# shape / linear algebra


def matmul(a, b):
    """Matrix product for 1-D/2-D operands with reverse-mode gradients."""
    an, bn = a.data.ndim, b.data.ndim
    if an not in (1, 2) or bn not in (1, 2):
        raise ShapeError(f"matmul supports 1-D/2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}")
    out, tape = _make(a.data @ b.data, a, b)
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            if an == 2 and bn == 2:
                _accum(a, g @ b.data.T)
                _accum(b, a.data.T @ g)
            elif an == 1 and bn == 2:
                _accum(a, b.data @ g)
                _accum(b, np.outer(a.data, g))
            elif an == 2 and bn == 1:
                _accum(a, np.outer(g, b.data))
                _accum(b, a.data.T @ g)
            else:
                _accum(a, g * b.data)
                _accum(b, g * a.data)
        tape._ops.append(backward)
    return out


def transpose(x):
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got shape {x.data.shape}")
    out, tape = _make(x.data.T.copy(), x)
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            _accum(x, out.grad.T)
        tape._ops.append(backward)
    return out


def concat(a, b):
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise ShapeError(f"concat expects 1-D tensors, got {a.data.shape} and {b.data.shape}")
    n = a.data.shape[0]
    out, tape = _make(np.concatenate([a.data, b.data]), a, b)
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            _accum(a, out.grad[:n])
            _accum(b, out.grad[n:])
        tape._ops.append(backward)
    return out


def take_row(m, index):
    """Select one row of a 2-D tensor (embedding lookup)."""
    if m.data.ndim != 2:
        raise ShapeError(f"take_row expects a 2-D tensor, got shape {m.data.shape}")
    idx = int(index)
    out, tape = _make(m.data[idx].copy(), m)
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            if m.requires_grad:
                if m.grad is None:
                    m.grad = np.zeros_like(m.data)
                m.grad[idx] += out.grad
        tape._ops.append(backward)
    return out


def pick(x, index):
    """Select one entry of a 1-D tensor as a scalar."""
    if x.data.ndim != 1:
        raise ShapeError(f"pick expects a 1-D tensor, got shape {x.data.shape}")
    idx = int(index)
    out, tape = _make(np.asarray(x.data[idx]), x)
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            if x.requires_grad:
                if x.grad is None:
                    x.grad = np.zeros_like(x.data)
                x.grad[idx] += out.grad
        tape._ops.append(backward)
    return out


def tensor_sum(x):
    out, tape = _make(np.asarray(x.data.sum()), x)
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            _accum(x, np.broadcast_to(out.grad, x.data.shape))
        tape._ops.append(backward)
    return out


# ---------------------------------------------------------------------------
# softmax family


def softmax(x):
    """Stable softmax over a 1-D tensor; output is positive and sums to 1."""
    if x.data.ndim != 1 or x.data.shape[0] < 1:
        raise ShapeError(f"softmax expects a non-empty 1-D tensor, got shape {x.data.shape}")
    shifted = x.data - x.data.max()
    e = np.exp(shifted)
    y = e / e.sum()
    out, tape = _make(y, x)
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            _accum(x, y * (g - np.dot(g, y)))
        tape._ops.append(backward)
    return out


def log_softmax(x):
    if x.data.ndim != 1 or x.data.shape[0] < 1:
        raise ShapeError(f"log_softmax expects a non-empty 1-D tensor, got shape {x.data.shape}")
    shifted = x.data - x.data.max()
    lse = np.log(np.exp(shifted).sum())
    y = shifted - lse
    out, tape = _make(y, x)
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            _accum(x, g - np.exp(y) * g.sum())
        tape._ops.append(backward)
    return out


# ---------------------------------------------------------------------------
# fused LSTM cell


@dataclass
class CellParams:
    """Weights of one LSTM cell.

    ``w`` packs the four gates row-wise in (input, forget, candidate, output)
    order and acts on the concatenation [x, h_prev]; ``b`` is the matching
    bias. Hidden size h gives w shape (4h, n_in + h) and b shape (4h,).
    """

    w: Tensor
    b: Tensor

    @property
    def hidden_size(self):
        return self.b.data.shape[0] // 4

    def tensors(self):
        return [self.w, self.b]


def lstm_cell(x, h_prev, c_prev, params):
    """One step of a standard peephole-free LSTM.

    Returns (h, c) with h = o * tanh(c) and c = f * c_prev + i * g. Recorded
    as a single fused tape operation with a hand-derived backward pass.
    """
    w, b = params.w.data, params.b.data
    hidden = b.shape[0] // 4
    n_in = w.shape[1] - hidden
    if x.data.shape != (n_in,):
        raise ShapeError(f"lstm_cell input has shape {x.data.shape}, cell expects ({n_in},)")
    if h_prev.data.shape != (hidden,) or c_prev.data.shape != (hidden,):
        raise ShapeError(
            f"lstm_cell state has shapes {h_prev.data.shape}/{c_prev.data.shape}, "
            f"cell expects ({hidden},)")

    xh = np.concatenate([x.data, h_prev.data])
    z = w @ xh + b
    i = 1.0 / (1.0 + np.exp(-z[:hidden]))
    f = 1.0 / (1.0 + np.exp(-z[hidden:2 * hidden]))
    g = np.tanh(z[2 * hidden:3 * hidden])
    o = 1.0 / (1.0 + np.exp(-z[3 * hidden:]))
    c_new = f * c_prev.data + i * g
    tanh_c = np.tanh(c_new)
    h_new = o * tanh_c

    tape = _active_tape()
    track = tape is not None and any(
        t.requires_grad for t in (x, h_prev, c_prev, params.w, params.b))
    h_out = Tensor(h_new, requires_grad=track)
    c_out = Tensor(c_new, requires_grad=track)
    if track:
        def backward():
            dh = h_out.grad
            dc_in = c_out.grad
            if dh is None and dc_in is None:
                return
            if dh is None:
                dh = np.zeros(hidden, dtype=c_new.dtype)
            dc = dc_in.copy() if dc_in is not None else np.zeros(hidden, dtype=c_new.dtype)
            do = dh * tanh_c
            dc += dh * o * (1.0 - tanh_c * tanh_c)
            di = dc * g
            df = dc * c_prev.data
            dg = dc * i
            dz = np.concatenate([
                di * i * (1.0 - i),
                df * f * (1.0 - f),
                dg * (1.0 - g * g),
                do * o * (1.0 - o),
            ])
            _accum(params.w, np.outer(dz, xh))
            _accum(params.b, dz)
            dxh = w.T @ dz
            _accum(x, dxh[:n_in])
            _accum(h_prev, dxh[n_in:])
            _accum(c_prev, dc * f)
        tape._ops.append(backward)
    return h_out, c_out


# ---------------------------------------------------------------------------
# gradient verification


def grad_check(f, params, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` is a zero-argument callable evaluating a scalar Tensor from the
    given parameters; ``params`` maps names to Tensors (a plain list is also
    accepted). The error per element is |a - n| / max(1, |a| + |n|).
    """
    if not 1e-7 <= eps <= 1e-4:
        raise DomainError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    named = params.items() if isinstance(params, dict) else [
        (f"param{i}", p) for i, p in enumerate(params)]
    named = list(named)

    zero_grads(p for _, p in named)
    with Tape() as tape:
        out = f()
    if out.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {out.data.shape}")
    tape.backward(out)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in named}

    worst = 0.0
    for name, p in named:
        flat = p.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            f_plus = float(f().data)
            flat[k] = orig - eps
            f_minus = float(f().data)
            flat[k] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(f"non-finite objective while perturbing {name}[{k}]")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = a_flat[k]
            err = abs(a - numeric) / max(1.0, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
