"""Reverse-mode automatic differentiation over numpy arrays.

Every differentiable operation returns a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients.
:func:`backward` walks the recorded graph once in reverse topological order.

Broadcasting is deliberately limited: elementwise binary ops accept equal
shapes, Python scalars, or a right operand whose shape is a trailing suffix of
the left operand's shape (bias-add).  Anything else needs an explicit
:func:`reshape` / :func:`broadcast_to`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)
_grad_enabled = True


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class NumericError(FloatingPointError):
    """A forward or backward value became NaN or infinite."""


class TapeError(RuntimeError):
    """Backward was requested on an invalid or already consumed graph."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {what}")


class Tensor:
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if arr.dtype not in _FLOAT_DTYPES:
            raise TypeError(f"unsupported dtype {arr.dtype}")
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result; record the graph edge when any parent needs grad."""
    out = Tensor.__new__(Tensor)
    _check_finite(data, "forward pass")
    out.data = data
    out.grad = None
    out._consumed = False
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} need an explicit reshape")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead))) if lead else grad


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data + c, (a,), lambda g: (g,))
    _binary_shapes(a, b, "add")
    bshape = b.shape
    return _result(a.data + b.data, (a, b), lambda g: (g, _unbroadcast(g, bshape)))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _binary_shapes(a, b, "sub")
    bshape = b.shape
    return _result(a.data - b.data, (a, b), lambda g: (g, -_unbroadcast(g, bshape)))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data * c, (a,), lambda g: (g * c,))
    _binary_shapes(a, b, "mul")
    ad, bd, bshape = a.data, b.data, b.shape
    return _result(ad * bd, (a, b), lambda g: (g * bd, _unbroadcast(g * ad, bshape)))


def reciprocal(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore"):
        out = 1.0 / a.data
    return _result(out, (a,), lambda g: (-g * out * out,))


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    ad = a.data
    return _result(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _result(out, (a,), lambda g: (g / ad,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # numerically safe for large |x|
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(a)), stable for large |a|."""
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _result(out, (a,), lambda g: (g * _sigmoid(x),))


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast; ``a`` must already have ``len(shape)`` dims."""
    shape = tuple(shape)
    if a.ndim != len(shape):
        raise ShapeError(f"broadcast_to: reshape {a.shape} to rank {len(shape)} first")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s != t)
    for i in axes:
        if a.shape[i] != 1:
            raise ShapeError(f"broadcast_to: cannot expand {a.shape} to {shape}")
    return _result(np.broadcast_to(a.data, shape).copy(), (a,),
                   lambda g: (g.sum(axis=axes, keepdims=True),))


def _is_basic_index(idx) -> bool:
    if not isinstance(idx, tuple):
        idx = (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in idx)


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(a.data[idx]), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    return _result(out, tensors,
                   lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(tensors))))


def reduce_max(a: Tensor, axis: int, mask: np.ndarray | None = None) -> Tensor:
    """Max along ``axis``; gradient goes to the first maximal element.

    ``mask`` (same shape as ``a``, boolean) excludes positions; every slice
    along ``axis`` must keep at least one position.
    """
    axis = axis % a.ndim
    if a.shape[axis] == 0:
        raise ShapeError("reduce_max over an empty axis")
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=axis).all():
            raise ShapeError("reduce_max: a slice is fully masked")
        x = np.where(mask, x, -np.inf)
    arg = np.expand_dims(np.argmax(x, axis=axis), axis)
    out = np.take_along_axis(a.data, arg, axis=axis).squeeze(axis)
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.put_along_axis(full, arg, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _result(out, (a,), bw)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace positions where ``mask`` is False by ``value`` (no gradient there)."""
    keep = np.asarray(mask, dtype=bool)
    return _result(np.where(keep, a.data, value).astype(a.dtype), (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supports ``(..., k) @ (k, n)`` (weights on the right) and batched
    ``(B, m, k) @ (B, k, n)`` with equal leading extents.
    """
    ad, bd = a.data, b.data
    if bd.ndim == 2:
        if ad.shape[-1] != bd.shape[0]:
            raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
        out = ad @ bd

        def bw(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

        return _result(out, (a, b), bw)
    if ad.ndim == bd.ndim and ad.ndim >= 3 and ad.shape[:-2] == bd.shape[:-2]:
        if ad.shape[-1] != bd.shape[-2]:
            raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
        out = ad @ bd
        return _result(out, (a, b),
                       lambda g: (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g))
    raise ShapeError(f"matmul: unsupported operand shapes {a.shape} @ {b.shape}")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _result(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; masked-out positions (mask False) get probability 0."""
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        x = np.where(mask, x, -np.inf)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)
    return _result(p, (a,), lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None,
           stride=(1, 1), padding=(0, 0)) -> Tensor:
    """Valid 2-D cross-correlation.

    ``x`` is ``(C_in, H, W)`` or batched ``(B, C_in, H, W)``; ``kernels`` is
    ``(C_out, C_in, kh, kw)``.  Zero padding is applied only when requested.
    """
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    kd = kernels.data
    if xd.ndim != 4 or kd.ndim != 4:
        raise ShapeError(f"conv2d: bad ranks {x.shape}, {kernels.shape}")
    sh, sw = stride
    ph, pw = padding
    if ph or pw:
        xd = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    B, C, H, W = xd.shape
    co, ci, kh, kw = kd.shape
    if ci != C:
        raise ShapeError(f"conv2d: {C} input channels but kernels expect {ci}")
    if kh > H or kw > W:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than input {H}x{W}")
    Ho = (H - kh) // sh + 1
    Wo = (W - kw) // sw + 1
    win = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw][:, :, :Ho, :Wo]            # B, C, Ho, Wo, kh, kw
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B, Ho, Wo, C * kh * kw)
    kmat = kd.reshape(co, -1)
    out = cols @ kmat.T                                     # B, Ho, Wo, co
    if bias is not None:
        out = out + bias.data
    out = out.transpose(0, 3, 1, 2)
    parents = (x, kernels) if bias is None else (x, kernels, bias)

    def bw(g):
        g = g[None] if unbatched else g
        gt = g.transpose(0, 2, 3, 1)                        # B, Ho, Wo, co
        gk = (gt.reshape(-1, co).T @ cols.reshape(-1, C * kh * kw)).reshape(kd.shape)
        gx = None
        if x.requires_grad:
            gcols = (gt @ kmat).reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            gcols = np.ascontiguousarray(gcols)             # B, C, kh, kw, Ho, Wo
            gx = np.zeros((B, C, H, W), dtype=xd.dtype)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw] += gcols[:, :, i, j]
            if ph or pw:
                gx = gx[:, :, ph:H - ph, pw:W - pw]
            if unbatched:
                gx = gx[0]
        grads = (gx, gk)
        if bias is not None:
            grads += (gt.sum(axis=(0, 1, 2)),)
        return grads

    return _result(out[0] if unbatched else out, parents, bw)


def conv_out_len(n: int, k: int, stride: int, pad: int = 0) -> int:
    return (n + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------------------
# recurrent cells
# ---------------------------------------------------------------------------


def lstm_step(x: Tensor, state: tuple[Tensor, Tensor], w_ih: Tensor, w_hh: Tensor,
              bias: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step from primitive ops.  Gate order: input, forget, cell, output."""
    h, c = state
    if w_ih.shape[0] != x.shape[-1] or w_hh.shape[0] != h.shape[-1]:
        raise ShapeError(f"lstm_step: x {x.shape}, h {h.shape}, w_ih {w_ih.shape}, w_hh {w_hh.shape}")
    H = h.shape[-1]
    z = matmul(x, w_ih) + matmul(h, w_hh) + bias
    i = sigmoid(z[..., :H])
    f = sigmoid(z[..., H:2 * H])
    g = tanh(z[..., 2 * H:3 * H])
    o = sigmoid(z[..., 3 * H:])
    c_new = f * c + i * g
    h_new = o * tanh(c_new)
    return h_new, c_new


def lstm_sequence(pre: Tensor, w_hh: Tensor, lengths: np.ndarray | None = None) -> Tensor:
    """Run the LSTM recurrence over precomputed input projections.

    ``pre`` is ``(B, T, 4H)`` = ``x @ w_ih + bias``.  Sequences are
    left-aligned; outputs (and state) are zero beyond each sequence length.
    Returns hidden states ``(B, T, H)``.  Numerically identical to chaining
    :func:`lstm_step`, but records a single graph node.
    """
    P, W = pre.data, w_hh.data
    B, T, G = P.shape
    H = G // 4
    if W.shape != (H, G):
        raise ShapeError(f"lstm_sequence: w_hh {W.shape} does not match {G} gate units")
    dt = P.dtype
    if lengths is None:
        lengths = np.full(B, T)
    mask = (np.arange(T)[None, :] < np.asarray(lengths)[:, None]).astype(dt)[..., None]
    hs = np.zeros((B, T + 1, H), dtype=dt)     # hs[:, t+1] = h_t
    cs = np.zeros((B, T + 1, H), dtype=dt)
    acts = np.empty((B, T, G), dtype=dt)
    tcs = np.empty((B, T, H), dtype=dt)
    for t in range(T):
        z = P[:, t] + hs[:, t] @ W
        a = acts[:, t]
        a[:] = _sigmoid(z)
        a[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
        c = a[:, H:2 * H] * cs[:, t] + a[:, :H] * a[:, 2 * H:3 * H]
        tc = np.tanh(c)
        tcs[:, t] = tc
        m = mask[:, t]
        cs[:, t + 1] = c * m
        hs[:, t + 1] = a[:, 3 * H:] * tc * m

    def bw(gout):
        dP = np.empty_like(P)
        dW = np.zeros_like(W)
        dh = np.zeros((B, H), dtype=dt)
        dc = np.zeros((B, H), dtype=dt)
        WT = W.T
        for t in range(T - 1, -1, -1):
            m = mask[:, t]
            a = acts[:, t]
            i, f, g, o = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
            tc = tcs[:, t]
            gh = (gout[:, t] + dh) * m
            gc = dc * m + gh * o * (1.0 - tc * tc)
            dz = dP[:, t]
            dz[:, :H] = gc * g * i * (1.0 - i)
            dz[:, H:2 * H] = gc * cs[:, t] * f * (1.0 - f)
            dz[:, 2 * H:3 * H] = gc * i * (1.0 - g * g)
            dz[:, 3 * H:] = gh * tc * o * (1.0 - o)
            dW += hs[:, t].T @ dz
            dh = dz @ WT
            dc = gc * f
        return dP, dW

    return _result(hs[:, 1:].copy(), (pre, w_hh), bw)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every grad-requiring tensor reachable from ``loss``.

    Leaf gradients accumulate across calls; the graph is consumed afterwards.
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise TapeError("this graph was already consumed by a previous backward")
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any tensor requiring grad")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            # leaf
            if node.requires_grad and g is not None:
                _check_finite(g, "backward pass")
                node.grad = g.copy() if node.grad is None else node.grad + g
            node._consumed = node._consumed or node is loss
            continue
        if g is None:
            g = np.zeros_like(node.data)
        node.grad = g
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._backward = None
        node._parents = ()
        node._consumed = True


def zeros(shape, dtype=np.float64, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.isfinite(t.data).all() for t in tensors)
