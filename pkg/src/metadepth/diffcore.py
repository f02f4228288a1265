"""Reverse-mode differentiation over dense numpy arrays.

Every differentiable op appends a :class:`TapeNode` to the tape owned by the
current thread. ``backward`` walks that tape once, newest node first, and
deposits gradients on the leaf tensors that asked for them.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}

_state = threading.local()
_debug = False


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Raised on misuse of the gradient tape (non-scalar loss, reuse)."""


class NonFiniteError(FloatingPointError):
    """Raised in debug mode when an op produces NaN or Inf."""


def set_debug(enabled: bool) -> None:
    """Toggle NaN/Inf verification of every op output and gradient."""
    global _debug
    _debug = bool(enabled)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if _debug and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


@dataclass
class TapeNode:
    op: str
    inputs: tuple
    output: "Tensor"
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    saved: dict = field(default_factory=dict)


class Tape:
    """Append-only record of one forward pass."""

    def __init__(self) -> None:
        self.nodes: list[TapeNode] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)


def current_tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None or tape.consumed:
        tape = Tape()
        _state.tape = tape
    return tape


def reset_tape() -> Tape:
    """Drop whatever the current thread recorded and start a fresh tape."""
    _state.tape = Tape()
    return _state.tape


class Tensor:
    """A numpy array that may take part in the gradient tape."""

    empty_mask = False

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return total(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, vjp, **saved) -> Tensor:
    _check_finite(out_data, op)
    out = Tensor(out_data)
    if any(t.requires_grad for t in inputs):
        tape = None
        for t in inputs:
            if t._tape is not None and t.requires_grad:
                tape = t._tape
                break
        if tape is None:
            tape = current_tape()
        if tape.consumed:
            raise TapeError("cannot extend a tape that has already been consumed")
        out.requires_grad = True
        out._tape = tape
        tape.nodes.append(TapeNode(op, tuple(inputs), out, vjp, saved))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf that contributed to ``loss``."""
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
            return
        raise TapeError("loss is not connected to any tensor requiring grad")
    if tape.consumed:
        raise TapeError("tape already consumed by an earlier backward call")
    tape.consumed = True

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.vjp(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            _check_finite(gi, f"grad of {node.op}")
            if t._tape is None:
                # leaf
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                key = id(t)
                grads[key] = gi if key not in grads else grads[key] + gi
    tape.nodes.clear()


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    sa, sb = a.shape, b.shape
    return _record(
        "add", (a, b), a.data + b.data,
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", (a, b), ad * bd, vjp)


def total(x: Tensor) -> Tensor:
    shape = x.shape
    return _record("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def elu(x: Tensor) -> Tensor:
    """ELU with unit alpha: x for x > 0, exp(x) - 1 otherwise."""
    xd = x.data
    neg = np.expm1(np.minimum(xd, 0))
    out = np.where(xd > 0, xd, neg)
    return _record("elu", (x,), out, lambda g: (np.where(xd > 0, g, g * (neg + 1)),))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # exp(-softplus(-x)) stays finite for any finite x
    out = np.exp(-np.logaddexp(0, -xd)).astype(xd.dtype, copy=False)
    return _record("sigmoid", (x,), out, lambda g: (g * out * (1 - out),))


def blend(a: Tensor, b: Tensor, weight) -> Tensor:
    """``weight * a + (1 - weight) * b`` with a constant, broadcastable weight."""
    w = np.asarray(weight, dtype=a.dtype)
    wc = (1 - w).astype(a.dtype)
    if a.shape != b.shape:
        raise DimensionError(f"blend operands differ: {a.shape} vs {b.shape}")
    shape = a.shape

    def vjp(g):
        return _unbroadcast(g * w, shape), _unbroadcast(g * wc, shape)

    return _record("blend", (a, b), w * a.data + wc * b.data, vjp)


# ---------------------------------------------------------------------------
# spatial ops


def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an OIKhKw kernel."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise DimensionError(f"conv2d channel mismatch: input axis 1 has {c}, kernel axis 1 has {ci}")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise DimensionError(
            f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{wd + 2 * padding} (axes 2, 3)"
        )
    if b is not None and b.shape != (o,):
        raise DimensionError(f"conv2d bias must have shape ({o},), got {b.shape}")
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(wd, kw, stride, padding)
    dtype = x.dtype
    hp, wp = h + 2 * padding, wd + 2 * padding

    # channel-major padded copy: (C, N, Hp, Wp)
    xt = np.zeros((c, n, hp, wp), dtype=dtype)
    xt[:, :, padding:padding + h, padding:padding + wd] = x.data.transpose(1, 0, 2, 3)
    # cols: (C, Kh, Kw, N, Ho, Wo) so the GEMM output is already (O, N*Ho*Wo)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    wmat = w.data.reshape(o, c * kh * kw)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))
    # (Kh, Kw, C, O), contiguous so per-offset products stay on BLAS
    w_off = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0))

    def vjp(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, n * ho * wo)
        gw = (gt @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = gt.sum(axis=1) if (b is not None and b.requires_grad) else None
        gx = None
        if x.requires_grad:
            gxp = np.zeros((c, n, hp, wp), dtype=g.dtype)
            g4 = gt.reshape(o, n, ho, wo)
            for i in range(kh):
                for j in range(kw):
                    wij = w_off[i, j]
                    if o <= 4:
                        contrib = wij[:, 0, None, None, None] * g4[0]
                        for q in range(1, o):
                            contrib += wij[:, q, None, None, None] * g4[q]
                    else:
                        contrib = (wij @ gt).reshape(c, n, ho, wo)
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib
            gx = gxp[:, :, padding:padding + h, padding:padding + wd].transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(gx)
        return (gx, gw) if b is None else (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return _record("conv2d", inputs, out, vjp, stride=stride, padding=padding)


def _upsample_matrix(n: int, dtype) -> np.ndarray:
    """Bilinear 2x weights along one axis, align-corners=False."""
    m = np.zeros((2 * n, n), dtype=dtype)
    for o in range(2 * n):
        src = max((o + 0.5) / 2 - 0.5, 0.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        m[o, i0] += 1 - frac
        m[o, i1] += frac
    return m


_up_cache: dict = {}


def _up(n: int, dtype) -> np.ndarray:
    key = (n, np.dtype(dtype).str)
    if key not in _up_cache:
        _up_cache[key] = _upsample_matrix(n, dtype)
    return _up_cache[key]


def upsample2x(x: Tensor) -> Tensor:
    """Bilinear 2x upsampling of an NCHW tensor."""
    if x.ndim != 4:
        raise DimensionError(f"upsample2x expects NCHW, got {x.shape}")
    _, _, h, w = x.shape
    uh, uw = _up(h, x.dtype), _up(w, x.dtype)
    out = np.matmul(np.matmul(uh, x.data), uw.T)
    return _record("upsample2x", (x,), out, lambda g: (np.matmul(np.matmul(uh.T, g), uw),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise DimensionError(f"concat_channels expects NCHW tensors, got {a.shape} and {b.shape}")
    for axis in (0, 2, 3):
        if a.shape[axis] != b.shape[axis]:
            raise DimensionError(f"concat_channels mismatch on axis {axis}: {a.shape} vs {b.shape}")
    c1 = a.shape[1]
    return _record(
        "concat", (a, b), np.concatenate([a.data, b.data], axis=1),
        lambda g: (g[:, :c1], g[:, c1:]),
    )


def flip_lr(x: Tensor) -> Tensor:
    return _record("flip_lr", (x,), x.data[..., ::-1].copy(), lambda g: (g[..., ::-1].copy(),))


# ---------------------------------------------------------------------------
# losses


def l2_loss(pred: Tensor, target, mask=None, per_sample: bool = False) -> Tensor:
    """Masked mean squared error.

    With ``per_sample`` the mean is taken inside each batch item first and the
    items are then averaged, i.e. ``(1/K) sum_k mse_k``; items with no valid
    pixel are left out. An empty mask yields a zero loss with
    ``empty_mask`` set instead of NaN.
    """
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise DimensionError(f"l2_loss shape mismatch: {pred.shape} vs {target.shape}")
    if mask is None:
        m = np.ones(pred.shape, dtype=pred.dtype)
    else:
        m = np.asarray(mask.data if isinstance(mask, Tensor) else mask).astype(pred.dtype)
        if m.shape != pred.shape:
            raise DimensionError(f"l2_loss mask shape {m.shape} differs from {pred.shape}")
    if per_sample:
        counts = m.reshape(m.shape[0], -1).sum(axis=1)
        live = counts > 0
        nlive = int(live.sum())
        denom = np.where(live, counts * max(nlive, 1), 1.0).astype(pred.dtype)
        weight = m / denom.reshape((-1,) + (1,) * (m.ndim - 1))
        empty = nlive == 0
    else:
        count = m.sum()
        empty = count == 0
        weight = m / (count if count > 0 else 1)
    diff = pred.data - target
    out = _record(
        "l2_loss", (pred,), np.asarray((weight * diff * diff).sum(), dtype=pred.dtype),
        lambda g: (2 * g * weight * diff,),
    )
    if empty:
        out.empty_mask = True
    return out


# ---------------------------------------------------------------------------
# finite-difference checking


def numerical_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], index: int, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn(*tensors)`` with respect to ``arrays[index]``."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    x = base[index]
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(fn(*[Tensor(a) for a in base]).data)
        flat[i] = orig - eps
        lo = float(fn(*[Tensor(a) for a in base]).data)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def gradcheck(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], eps: float = 1e-5) -> float:
    """Largest relative error between tape and central-difference gradients.

    The error of each input is ``max|analytic - numeric| / max(max|analytic|,
    max|numeric|, 1e-8)``. ``fn`` must return a scalar tensor and is evaluated
    in float64.
    """
    reset_tape()
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    backward(fn(*leaves))
    worst = 0.0
    for i, t in enumerate(leaves):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_grad(fn, arrays, i, eps)
        scale = max(np.abs(analytic).max(initial=0), np.abs(numeric).max(initial=0), 1e-8)
        worst = max(worst, float(np.abs(analytic - numeric).max(initial=0) / scale))
    return worst
