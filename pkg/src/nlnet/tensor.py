"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op returns a new :class:`Tensor`. When any input requires a gradient the
output carries a :class:`Node` linking it to its inputs and a backward closure;
:class:`GradTape` linearises those nodes into topological order and replays
them in reverse.

Layout convention for video activations is channels-last ``[B, T, H, W, C]``.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

_state = threading.local()
_ids = itertools.count()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@dataclass
class Node:
    op: str
    inputs: tuple
    backward: Callable[[np.ndarray], tuple]


class Tensor:
    """N-d array of float64 with an optional gradient buffer."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.id = next(_ids)
        self._node: Node | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self, grad=None) -> "GradTape":
        tape = GradTape.from_output(self)
        tape.backward(grad)
        return tape

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class TapeRecord:
    op: str
    input_ids: tuple
    output_id: int
    node: Node = field(repr=False)
    output: Tensor = field(repr=False)


class GradTape:
    """Topologically ordered record of the ops that produced an output.

    Records are stored in forward order, so each record's inputs were produced
    by earlier records (or are leaves). ``backward`` visits each record once,
    in reverse.
    """

    def __init__(self, records: list[TapeRecord], root: Tensor):
        self.records = records
        self.root = root

    @classmethod
    def from_output(cls, out: Tensor) -> "GradTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if t.id in seen or t._node is None:
                continue
            seen.add(t.id)
            stack.append((t, True))
            for parent in reversed(t._node.inputs):
                if isinstance(parent, Tensor) and parent._node is not None and parent.id not in seen:
                    stack.append((parent, False))
        records = [
            TapeRecord(t._node.op, tuple(p.id for p in t._node.inputs), t.id, t._node, t)
            for t in order
        ]
        return cls(records, out)

    def backward(self, grad=None) -> None:
        root = self.root
        if grad is None:
            if root.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar output, got {root.shape}")
            grad = np.ones_like(root.data)
        grads: dict[int, np.ndarray] = {root.id: np.asarray(grad, dtype=np.float64).reshape(root.shape)}
        if root._node is None and root.requires_grad:
            _accumulate(root, grads[root.id])
        for rec in reversed(self.records):
            g_out = grads.pop(rec.output_id, None)
            if g_out is None:
                continue
            in_grads = rec.node.backward(g_out)
            for parent, g in zip(rec.node.inputs, in_grads):
                if g is None or not isinstance(parent, Tensor):
                    continue
                if parent._node is not None:
                    prev = grads.get(parent.id)
                    grads[parent.id] = g if prev is None else prev + g
                elif parent.requires_grad:
                    _accumulate(parent, g)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _needs_grad(*ts) -> bool:
    return grad_enabled() and any(
        isinstance(t, Tensor) and (t.requires_grad or t._node is not None) for t in ts
    )


def _make(data: np.ndarray, op: str, inputs: tuple, backward: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor(data)
    if _needs_grad(*inputs):
        out._node = Node(op, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return _make(a.data - b.data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, "mul", (a, b), backward)


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), "sum", (a,), backward)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tsum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} to {tuple(shape)}") from exc

    def backward(g):
        return (g.reshape(src),)

    return _make(out, "reshape", (a,), backward)


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {axes} for shape {a.shape}")
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _make(np.ascontiguousarray(a.data.transpose(axes)), "permute", (a,), backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % a.ndim
    if not 0 <= start < stop <= a.shape[axis]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of {a.shape}")
    idx = (slice(None),) * axis + (slice(start, stop),)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _make(a.data[idx].copy(), "slice", (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _make(a.data * mask, "relu", (a,), backward)


def outer_sum(a: Tensor, b: Tensor) -> Tensor:
    """``out[..., i, j] = a[..., i] + b[..., j]``."""
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"outer_sum leading dims differ: {a.shape} vs {b.shape}")

    def backward(g):
        return g.sum(axis=-1), g.sum(axis=-2)

    return _make(a.data[..., :, None] + b.data[..., None, :], "outer_sum", (a, b), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, "matmul", (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------


def softmax_rows(m: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along the last axis with per-row max subtraction.

    ``mask`` (boolean, broadcastable to ``m``) marks admissible entries;
    masked entries get exactly zero weight. Every row must keep at least one
    admissible entry.
    """
    x = m.data
    if not np.all(np.isfinite(x)):
        raise NumericError("softmax_rows received non-finite input")
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=-1).all():
            raise ShapeError("softmax_rows mask leaves an empty row")
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, "softmax_rows", (m,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row-softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects [B,K] logits and [B] labels, got {logits.shape}, {labels.shape}")
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    n = x.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    return _make(np.asarray(loss), "cross_entropy", (logits,), backward)


# ---------------------------------------------------------------------------
# convolution and pooling on [B, T, H, W, C]
# ---------------------------------------------------------------------------

PAD_MODES = ("zero", "replicate_time")


def _triple(v) -> tuple:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ShapeError(f"expected 3 values (t, h, w), got {v}")
    return v


def conv_output_extent(length: int, kernel: int, stride: int, pad: int) -> int:
    return (length + 2 * pad - kernel) // stride + 1


def conv3d(x: Tensor, w: Tensor, stride=1, padding=0, pad_mode: str = "zero") -> Tensor:
    """Cross-correlation of ``x[B,T,H,W,Cin]`` with ``w[t,kh,kw,Cin,Cout]``.

    ``pad_mode='replicate_time'`` pads the temporal axis by repeating edge
    frames; spatial padding is always zero.
    """
    if pad_mode not in PAD_MODES:
        raise ValueError(f"pad_mode must be one of {PAD_MODES}, got {pad_mode!r}")
    if x.ndim != 5 or w.ndim != 5 or x.shape[-1] != w.shape[3]:
        raise ShapeError(f"conv3d shape mismatch: input {x.shape}, weight {w.shape}")
    stride, pad = _triple(stride), _triple(padding)
    kt, kh, kw, ci, co = w.shape
    B, T, H, W, _ = x.shape
    for L, k, p, axis in zip((T, H, W), (kt, kh, kw), pad, "THW"):
        if k > L + 2 * p:
            raise ShapeError(f"conv3d kernel {w.shape[:3]} larger than padded input {x.shape} on axis {axis}")
    xd = x.data
    pt, ph, pw = pad
    if pt and pad_mode == "replicate_time":
        xd = np.pad(xd, ((0, 0), (pt, pt), (0, 0), (0, 0), (0, 0)), mode="edge")
        tpad = 0
    else:
        tpad = pt
    if tpad or ph or pw:
        xd = np.pad(xd, ((0, 0), (tpad, tpad), (ph, ph), (pw, pw), (0, 0)))
    st, sh, sw = stride
    To, Ho, Wo = (conv_output_extent(L, k, s, p) for L, k, s, p in zip((T, H, W), (kt, kh, kw), stride, pad))
    wd = w.data
    padded_shape = xd.shape
    want_dx = _needs_grad(x)

    if (kt, kh, kw) == (1, 1, 1):
        xs = xd[:, ::st, ::sh, ::sw][:, :To, :Ho, :Wo]
        out = (xs.reshape(-1, ci) @ wd.reshape(ci, co)).reshape(B, To, Ho, Wo, co)

        def backward(g):
            g2 = g.reshape(-1, co)
            gw = (xs.reshape(-1, ci).T @ g2).reshape(wd.shape)
            if not want_dx:
                return None, gw
            gxs = (g2 @ wd.reshape(ci, co).T).reshape(xs.shape)
            gxp = np.zeros(padded_shape)
            gxp[:, 0 : st * To : st, 0 : sh * Ho : sh, 0 : sw * Wo : sw] = gxs
            return _unpad(gxp, pad, pad_mode), gw

        return _make(out, "conv3d", (x, w), backward)

    win = np.lib.stride_tricks.sliding_window_view(xd, (kt, kh, kw), axis=(1, 2, 3))
    win = win[:, ::st, ::sh, ::sw][:, :To, :Ho, :Wo]
    # win: [B, To, Ho, Wo, Cin, kt, kh, kw] -> columns [B*To*Ho*Wo, kt*kh*kw*Cin]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 3, 5, 6, 7, 4)).reshape(-1, kt * kh * kw * ci)
    wmat = wd.reshape(-1, co)
    out = (cols @ wmat).reshape(B, To, Ho, Wo, co)

    def backward(g):
        g2 = g.reshape(-1, co)
        gw = (cols.T @ g2).reshape(wd.shape)
        if not want_dx:
            return None, gw
        gcols = (g2 @ wmat.T).reshape(B, To, Ho, Wo, kt, kh, kw, ci)
        gxp = np.zeros(padded_shape)
        for a in range(kt):
            for b in range(kh):
                for c in range(kw):
                    gxp[:, a : a + st * To : st, b : b + sh * Ho : sh, c : c + sw * Wo : sw] += gcols[:, :, :, :, a, b, c]
        return _unpad(gxp, pad, pad_mode), gw

    return _make(out, "conv3d", (x, w), backward)


def _unpad(gxp: np.ndarray, pad: tuple, pad_mode: str) -> np.ndarray:
    pt, ph, pw = pad
    T = gxp.shape[1] - 2 * pt
    H = gxp.shape[2] - 2 * ph
    W = gxp.shape[3] - 2 * pw
    g = gxp[:, :, ph : ph + H, pw : pw + W]
    if pt and pad_mode == "replicate_time":
        core = g[:, pt : pt + T].copy()
        core[:, 0] += g[:, :pt].sum(axis=1)
        core[:, -1] += g[:, pt + T :].sum(axis=1)
        return core
    return np.ascontiguousarray(g[:, pt : pt + T])


def max_pool3d(x: Tensor, window, stride=None, padding=0) -> Tensor:
    """Max over ``(t, h, w)`` windows of ``x[B,T,H,W,C]``.

    Padding is with ``-inf`` and must be smaller than the window, so every
    window holds at least one real element. Gradient goes to the first maximal
    element in window-linear order.
    """
    if x.ndim != 5:
        raise ShapeError(f"max_pool3d expects [B,T,H,W,C], got {x.shape}")
    window = _triple(window)
    stride = window if stride is None else _triple(stride)
    pad = _triple(padding)
    if min(window) < 1 or min(stride) < 1:
        raise ShapeError(f"window and stride must be >= 1, got {window}, {stride}")
    B, T, H, W, C = x.shape
    for L, k, p, axis in zip((T, H, W), window, pad, "THW"):
        if p >= k and p > 0:
            raise ShapeError(f"max_pool3d padding {pad} must be smaller than window {window}")
        if k > L + 2 * p:
            raise ShapeError(f"max_pool3d window {window} exceeds extent of {x.shape} on axis {axis}")
    xd = x.data
    pt, ph, pw = pad
    if any(pad):
        xd = np.pad(xd, ((0, 0), (pt, pt), (ph, ph), (pw, pw), (0, 0)), constant_values=-np.inf)
    st, sh, sw = stride
    kt, kh, kw = window
    To, Ho, Wo = (conv_output_extent(L, k, s, p) for L, k, s, p in zip((T, H, W), window, stride, pad))
    padded_shape = xd.shape
    win = np.lib.stride_tricks.sliding_window_view(xd, window, axis=(1, 2, 3))
    win = win[:, ::st, ::sh, ::sw][:, :To, :Ho, :Wo].reshape(B, To, Ho, Wo, C, kt * kh * kw)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gxp = np.zeros(padded_shape)
        k = 0
        for a in range(kt):
            for b in range(kh):
                for c in range(kw):
                    hit = arg == k
                    if hit.any():
                        gxp[:, a : a + st * To : st, b : b + sh * Ho : sh, c : c + sw * Wo : sw] += g * hit
                    k += 1
        return (np.ascontiguousarray(gxp[:, pt : pt + T, ph : ph + H, pw : pw + W]),)

    return _make(out, "max_pool3d", (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over every axis between batch and channels: ``[B, ..., C] -> [B, C]``."""
    if x.ndim < 3:
        raise ShapeError(f"global_avg_pool expects [B, ..., C], got {x.shape}")
    axes = tuple(range(1, x.ndim - 1))
    return mean(x, axes)


# ---------------------------------------------------------------------------
# normalisation and regularisation
# ---------------------------------------------------------------------------


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch norm over all leading axes of a channels-last input.

    In training mode batch statistics are used and the running buffers are
    updated in place as ``r = momentum * r + (1 - momentum) * batch_stat``.
    """
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm params {gamma.shape}/{beta.shape} do not match {C} channels")
    xd = x.data
    axes = tuple(range(xd.ndim - 1))
    gd = gamma.data
    if training:
        mu = xd.mean(axis=axes)
        xc = xd - mu
        var = (xc * xc).mean(axis=axes)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
        m = xd.size // C

        def backward(g):
            gg = (g * xhat).sum(axis=axes)
            gb = g.sum(axis=axes)
            gx = (gd * inv / m) * (m * g - gb - xhat * gg)
            return gx, gg, gb

    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (xd - running_mean) * inv

        def backward(g):
            return g * (gd * inv), (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make(xhat * gd + beta.data, "batch_norm", (x, gamma, beta), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout: scale kept units by ``1/(1-p)`` at train time."""
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)

    def backward(g):
        return (g * keep,)

    return _make(x.data * keep, "dropout", (x,), backward)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[], Tensor], params: Tensor | Sequence[Tensor], eps: float = 1e-5) -> float:
    """Compare analytic gradients of a scalar function with central differences.

    ``f`` takes no arguments and closes over ``params``; it is re-evaluated
    with each parameter entry perturbed by ``±eps``. Returns the maximum over
    all entries of ``|a - n| / max(1, |a|, |n|)``.
    """
    if isinstance(params, Tensor):
        params = [params]
    params = list(params)
    for p in params:
        p.grad = None
        p.requires_grad = True
    out = f()
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                fp = _scalar(f())
                flat[i] = orig - eps
                fm = _scalar(f())
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst


def _scalar(t: Tensor) -> float:
    v = t.item()
    if not np.isfinite(v):
        raise NumericError("grad_check: function value is not finite")
    return v
