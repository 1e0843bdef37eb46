"""Small reverse-mode autodiff engine over numpy arrays.

Only the handful of operations the separation model needs are provided.
Shapes are checked when an op is applied; there is no implicit
broadcasting (``bias_add`` over the trailing axis and the explicit
``broadcast_to`` are the only exceptions).

Reductions used as losses follow the *mean* convention: ``l1_loss(a, b)``
is ``mean(|a - b|)`` over every element.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAPH_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation)."""
    global _GRAPH_ENABLED
    prev = _GRAPH_ENABLED
    _GRAPH_ENABLED = False
    try:
        yield
    finally:
        _GRAPH_ENABLED = prev


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes " + " vs ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class GradientError(RuntimeError):
    """Raised for invalid backward calls (non-scalar loss, stale gradients)."""


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return np.array(arr, dtype=dtype)
    if arr.dtype in (np.float32, np.float64, np.longdouble):
        return np.array(arr)
    return np.array(arr, dtype=np.float64)


class Tensor:
    """Dense array that records the ops producing it.

    ``data`` is a numpy array (float64 or float32). Leaves created with
    ``requires_grad=True`` are parameters; every op output that depends on
    such a leaf is itself ``requires_grad`` and remembers its parents and a
    closure that maps the output gradient to parent gradients.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._consumed = False
    if _GRAPH_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


def _axis(op: str, x: Tensor, axis: int) -> int:
    nd = x.ndim
    if not -nd <= axis < nd:
        raise ShapeError(op, x.shape, detail=f"axis {axis} out of range")
    return axis % nd


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    return _make(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    return _make(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), "mul", lambda g: (g * bd, g * ad))


def scale(a: Tensor, c) -> Tensor:
    """Multiply by a constant (scalar or array broadcastable to ``a``).

    The constant is not part of the graph.
    """
    c = np.asarray(c, dtype=a.dtype)
    try:
        out = a.data * c
    except ValueError:
        raise ShapeError("scale", a.shape, c.shape) from None
    if out.shape != a.shape:
        raise ShapeError("scale", a.shape, c.shape, detail="constant may not grow the operand")
    return _make(out, (a,), "scale", lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), "tanh", lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _make(y, (a,), "sigmoid", lambda g: (g * y * (1.0 - y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 + 0.5 * np.tanh(0.5 * x)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., K] @ b[K, M] -> [..., M]``; ``b`` must be 2-D."""
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    k, m = bd.shape

    def backward_fn(g):
        g = np.ascontiguousarray(g)
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.reshape(-1, k).T @ g.reshape(-1, m) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), "matmul", backward_fn)


def bias_add(a: Tensor, b: Tensor) -> Tensor:
    """Add a 1-D bias over the trailing axis."""
    if b.ndim != 1 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError("bias_add", a.shape, b.shape)
    m = b.shape[0]
    return _make(a.data + b.data, (a, b), "bias_add", lambda g: (g, g.reshape(-1, m).sum(axis=0)))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return bias_add(y, bias) if bias is not None else y


# ---------------------------------------------------------------- reductions


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = _axis("softmax", a, axis)
    if a.shape[ax] == 0:
        raise ShapeError("softmax", a.shape, detail=f"axis {axis} has size 0")
    z = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=ax, keepdims=True)

    def backward_fn(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return _make(y, (a,), "softmax", backward_fn)


def mean(a: Tensor, axis: int) -> Tensor:
    ax = _axis("mean", a, axis)
    n = a.shape[ax]
    if n == 0:
        raise ShapeError("mean", a.shape, detail=f"axis {axis} has size 0")
    shape = a.shape

    def backward_fn(g):
        return (np.broadcast_to(np.expand_dims(g, ax) / n, shape).copy(),)

    return _make(a.data.mean(axis=ax), (a,), "mean", backward_fn)


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    if axis is None:
        return _make(np.asarray(a.data.sum()), (a,), "sum", lambda g: (np.full(shape, g, dtype=a.dtype),))
    ax = _axis("sum", a, axis)

    def backward_fn(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _make(a.data.sum(axis=ax), (a,), "sum", backward_fn)


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference over all elements (scalar)."""
    _check_same("l1_loss", a, b)
    diff = a.data - b.data
    n = diff.size
    s = np.sign(diff) / n
    return _make(np.asarray(np.abs(diff).mean()), (a, b), "l1_loss", lambda g: (g * s, -g * s))


# ---------------------------------------------------------------- structural


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat", detail="no inputs")
    first = tensors[0]
    ax = _axis("concat", first, axis)
    for t in tensors[1:]:
        if t.ndim != first.ndim or any(
            i != ax and t.shape[i] != first.shape[i] for i in range(first.ndim)
        ):
            raise ShapeError("concat", first.shape, t.shape, detail=f"axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward_fn(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return out

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, "concat", backward_fn)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = _axis("slice", a, axis)
    n = a.shape[ax]
    if not 0 <= start <= stop <= n:
        raise ShapeError("slice", a.shape, detail=f"range [{start}, {stop}) on axis {axis}")
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    shape, dtype = a.shape, a.dtype

    def backward_fn(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _make(a.data[idx], (a,), "slice", backward_fn)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    src = a.shape
    return _make(out, (a,), "reshape", lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, detail=f"axes {axes}")
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), "transpose", lambda g: (g.transpose(inv),))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Expand size-1 axes explicitly. Ranks must match."""
    shape = tuple(shape)
    if len(shape) != a.ndim or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
        raise ShapeError("broadcast_to", a.shape, shape)
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s != t)
    return _make(
        np.broadcast_to(a.data, shape),
        (a,),
        "broadcast_to",
        lambda g: (g.sum(axis=axes, keepdims=True),),
    )


def overlap_add(frames: Tensor, hop: int) -> Tensor:
    """Sum frames ``[..., F, L]`` into a signal of length ``(F - 1) * hop + L``."""
    if frames.ndim < 2 or hop < 1:
        raise ShapeError("overlap_add", frames.shape, detail=f"hop {hop}")
    n_frames, length = frames.shape[-2:]
    lead = frames.shape[:-2]
    out_len = (n_frames - 1) * hop + length
    out = np.zeros(lead + (out_len,), dtype=frames.dtype)
    fd = frames.data
    for f in range(n_frames):
        out[..., f * hop : f * hop + length] += fd[..., f, :]

    def backward_fn(g):
        win = np.lib.stride_tricks.sliding_window_view(g, length, axis=-1)[..., ::hop, :]
        return (np.ascontiguousarray(win[..., :n_frames, :]),)

    return _make(out, (frames,), "overlap_add", backward_fn)


# ---------------------------------------------------------------- recurrent


def gru(
    x: Tensor,
    w_ih: Tensor,
    w_hh: Tensor,
    b_ih: Tensor,
    b_hh: Tensor,
    reverse: bool = False,
) -> Tensor:
    """Run a gated recurrent cell over ``x[S, T, I]``; returns ``[S, T, R]``.

    Weights are laid out gate-major as (reset, update, candidate):
    ``w_ih[I, 3R]``, ``w_hh[R, 3R]``, biases ``[3R]``. The initial state is
    zero. The whole sequence is one graph node with a hand-written
    backpropagation-through-time rule.
    """
    if x.ndim != 3:
        raise ShapeError("gru", x.shape, detail="expected [S, T, I]")
    s_, t_, i_ = x.shape
    if w_ih.ndim != 2 or w_ih.shape[0] != i_ or w_ih.shape[1] % 3:
        raise ShapeError("gru", x.shape, w_ih.shape)
    r_ = w_ih.shape[1] // 3
    if w_hh.shape != (r_, 3 * r_) or b_ih.shape != (3 * r_,) or b_hh.shape != (3 * r_,):
        raise ShapeError("gru", w_ih.shape, w_hh.shape, b_ih.shape, b_hh.shape)

    xd = x.data[:, ::-1] if reverse else x.data
    whh = w_hh.data
    gi = xd @ w_ih.data + b_ih.data  # [S, T, 3R]
    dtype = gi.dtype
    hs = np.zeros((s_, t_ + 1, r_), dtype=dtype)
    rs = np.empty((s_, t_, r_), dtype=dtype)
    zs = np.empty_like(rs)
    ns = np.empty_like(rs)
    ghn = np.empty_like(rs)
    for t in range(t_):
        h = hs[:, t]
        gh = h @ whh + b_hh.data
        rz = _sigmoid(gi[:, t, : 2 * r_] + gh[:, : 2 * r_])
        r, z = rz[:, :r_], rz[:, r_:]
        n = np.tanh(gi[:, t, 2 * r_ :] + r * gh[:, 2 * r_ :])
        hs[:, t + 1] = (1.0 - z) * n + z * h
        rs[:, t], zs[:, t], ns[:, t], ghn[:, t] = r, z, n, gh[:, 2 * r_ :]
    out = hs[:, 1:]
    if reverse:
        out = out[:, ::-1]
    out = np.ascontiguousarray(out)

    def backward_fn(g):
        g = g[:, ::-1] if reverse else g
        dgi = np.empty((s_, t_, 3 * r_), dtype=dtype)
        dgh = np.empty_like(dgi)
        dh = np.zeros((s_, r_), dtype=dtype)
        whh_t = whh.T
        for t in range(t_ - 1, -1, -1):
            dh = dh + g[:, t]
            r, z, n = rs[:, t], zs[:, t], ns[:, t]
            dn = dh * (1.0 - z) * (1.0 - n * n)
            dz = dh * (hs[:, t] - n) * z * (1.0 - z)
            dr = dn * ghn[:, t] * r * (1.0 - r)
            dgi[:, t, :r_] = dr
            dgi[:, t, r_ : 2 * r_] = dz
            dgi[:, t, 2 * r_ :] = dn
            dgh[:, t, : 2 * r_] = dgi[:, t, : 2 * r_]
            dgh[:, t, 2 * r_ :] = dn * r
            dh = dh * z + dgh[:, t] @ whh_t
        dgi2 = dgi.reshape(-1, 3 * r_)
        dgh2 = dgh.reshape(-1, 3 * r_)
        dwhh = hs[:, :-1].reshape(-1, r_).T @ dgh2
        dx = dgi @ w_ih.data.T
        if reverse:
            dx = dx[:, ::-1]
        dwih = xd.reshape(-1, i_).T @ dgi2
        return dx, dwih, dwhh, dgi2.sum(axis=0), dgh2.sum(axis=0)

    return _make(out, (x, w_ih, w_hh, b_ih, b_hh), "gru", backward_fn)


# ---------------------------------------------------------------- graph + backward


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``.

    Leaf gradients must be cleared (``zero_grad``) between passes; a stale
    leaf gradient or a second backward through the same graph raises
    :class:`GradientError`.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any tensor requiring grad")
    if loss._consumed:
        raise GradientError("backward already ran on this graph")
    order = topological_order(loss)
    for node in order:
        if node.is_leaf and node.grad is not None:
            raise GradientError("stale gradient on a leaf; call zero_grad() first")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            g = np.zeros_like(node.data)
        node.grad = g
        if node.is_leaf:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    loss._consumed = True


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------- gradient oracle


# finite differences are evaluated in the widest float numpy offers, so their
# rounding noise stays well below tiny (~1e-7) gradient components
REFERENCE_DTYPE = np.longdouble if np.finfo(np.longdouble).eps < np.finfo(np.float64).eps else np.float64


def grad_check(
    f: Callable,
    x: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
    *,
    max_coords: int | None = None,
    seed: int = 0,
    reference_dtype=REFERENCE_DTYPE,
) -> float:
    """Compare autodiff gradients of ``f(x)`` with central differences.

    ``x`` may be one tensor or a list of them; ``f`` receives it unchanged
    and must return a scalar :class:`Tensor`. With ``max_coords`` only that
    many randomly chosen coordinates per tensor are probed.

    The autodiff gradient is taken at the leaves' own precision. For the
    numeric side the leaves are temporarily widened to ``reference_dtype``;
    ``f`` must let that precision flow through (graph ops promote).

    Returns ``max |auto - numeric| / max(|auto|, |numeric|, 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    leaves = [x] if isinstance(x, Tensor) else list(x)
    for t in leaves:
        t.requires_grad = True
    zero_grad(leaves)

    loss = f(x)
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError("non-finite loss at the base point")
    if loss.requires_grad:
        backward(loss)
        # leaves the loss never reaches have a zero gradient
        auto = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in leaves]
    else:
        auto = [np.zeros_like(t.data) for t in leaves]
    zero_grad(leaves)

    originals = [t.data for t in leaves]
    ref = np.dtype(reference_dtype)
    rng = np.random.default_rng(seed)
    worst = 0.0
    try:
        for t in leaves:
            t.data = t.data.astype(np.promote_types(t.dtype, ref))
        for t, ga in zip(leaves, auto):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for i in coords:
                orig = flat[i]
                with no_grad():
                    flat[i] = orig + eps
                    fp = np.asarray(f(x).data)[()]
                    flat[i] = orig - eps
                    fm = np.asarray(f(x).data)[()]
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise FloatingPointError(f"non-finite loss while probing coordinate {i}")
                num = float((fp - fm) / (2 * eps))
                a = float(ga.reshape(-1)[i])
                err = abs(a - num) / max(abs(a), abs(num), 1e-8)
                worst = max(worst, err)
    finally:
        for t, o in zip(leaves, originals):
            t.data = o
    return worst
