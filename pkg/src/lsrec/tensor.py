"""A small dense tensor library with reverse-mode autodiff.

Only the operations the recommender needs are provided. There is no general
broadcasting: binary elementwise ops require equal shapes, and the few places
where the model needs a shared operand (a 2-D weight applied to a batch, a
norm weight over the last axis) are handled explicitly by the op.

Storage is float32. Inside :func:`shadow64` new tensors are created in
float64, which is what the finite-difference gradient checks run under.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "shadow64",
    "no_grad",
    "grad_enabled",
    "default_dtype",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "sum",
    "mean",
    "embedding",
    "take_rows",
    "softmax",
    "rms_norm",
    "silu",
    "rope",
    "repeat_heads",
    "dropout",
    "cross_entropy",
    "adamw_step",
    "AdamWState",
    "clip_grad_norm",
    "gradcheck",
]

_DTYPE = np.float32
_GRAD = True


class ShapeError(ValueError):
    pass


def default_dtype():
    return _DTYPE


def grad_enabled() -> bool:
    return _GRAD


@contextlib.contextmanager
def shadow64() -> Iterator[None]:
    """Create new tensors in float64 for the duration of the block."""
    global _DTYPE
    prev, _DTYPE = _DTYPE, np.float64
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording the graph (inference)."""
    global _GRAD
    prev, _GRAD = _GRAD, False
    try:
        yield
    finally:
        _GRAD = prev


class Tensor:
    """A numpy array plus the bookkeeping needed for backprop.

    ``grad`` is populated on leaves with ``requires_grad=True`` by
    :func:`backward` and accumulates across calls until reset with
    :meth:`zero_grad`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype or _DTYPE))
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple[Tensor, ...], fn) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        track = _GRAD and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = parents if track else ()
        out._backward = fn if track else None
        return out

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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every ``requires_grad`` leaf."""
    if loss.data.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return Tensor._result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return Tensor._result(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    ``b`` may be 2-D with ``a`` of any rank >= 2 (a weight applied to every
    row of a batch), or both may share the same leading batch extents.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ in {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        k, n = bd.shape

        def fn(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb

    elif a.ndim == b.ndim and a.shape[:-2] == b.shape[:-2]:

        def fn(g):
            return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    else:
        raise ShapeError(f"matmul: batch extents differ in {a.shape} @ {b.shape}")
    return Tensor._result(ad @ bd, (a, b), fn)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def sum(a: Tensor) -> Tensor:  # noqa: A001
    src = a.shape
    return Tensor._result(np.sum(a.data), (a,), lambda g: (np.broadcast_to(g, src).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return scale(sum(a), 1.0 / n)


def embedding(weight: Tensor, ids) -> Tensor:
    """Rows of ``weight`` gathered by integer ``ids`` (any shape)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"token id out of range [0, {weight.shape[0]})")
    wshape = weight.shape

    def fn(g):
        gw = np.zeros(wshape, dtype=g.dtype)
        np.add.at(gw, ids.ravel(), g.reshape(-1, wshape[1]))
        return (gw,)

    return Tensor._result(weight.data[ids], (weight,), fn)


def take_rows(x: Tensor, idx) -> Tensor:
    """Select rows ``idx`` of a 2-D tensor."""
    idx = np.asarray(idx, dtype=np.int64)
    src = x.shape

    def fn(g):
        gx = np.zeros(src, dtype=g.dtype)
        np.add.at(gx, idx, g)
        return (gx,)

    return Tensor._result(x.data[idx], (x,), fn)


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` (boolean, same shape) marks the admissible entries; the rest get
    probability exactly zero. Every row must keep at least one entry.
    """
    xd = x.data
    if not np.all(np.isfinite(xd)):
        raise FloatingPointError("softmax: non-finite input")
    if xd.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    if mask is not None:
        if mask.shape != xd.shape:
            raise ShapeError(f"softmax mask shape {mask.shape} != {xd.shape}")
        xd = np.where(mask, xd, -np.inf)
    z = xd - np.max(xd, axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def fn(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return Tensor._result(y, (x,), fn)


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-5) -> Tensor:
    """``x / sqrt(mean(x^2) + eps) * weight`` over the last axis."""
    if weight.ndim != 1 or weight.shape[0] != x.shape[-1]:
        raise ShapeError(f"rms_norm weight {weight.shape} does not match {x.shape}")
    xd, wd = x.data, weight.data
    r = 1.0 / np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + eps)
    r = r.astype(xd.dtype, copy=False)
    n = xd * r

    def fn(g):
        gw = np.sum((g * n).reshape(-1, wd.shape[0]), axis=0)
        gn = g * wd
        gx = r * (gn - n * np.mean(gn * n, axis=-1, keepdims=True))
        return gx, gw

    return Tensor._result(n * wd, (x, weight), fn)


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = 0.5 * (1.0 + np.tanh(0.5 * xd))

    def fn(g):
        return (g * s * (1.0 + xd * (1.0 - s)),)

    return Tensor._result(xd * s, (x,), fn)


def rope_angles(positions, head_dim: int, theta: float) -> np.ndarray:
    """Angles ``pos * theta**(-2i/head_dim)``, shape ``positions.shape + (head_dim/2,)``."""
    if head_dim % 2:
        raise ValueError(f"rotary embedding needs an even head_dim, got {head_dim}")
    inv_freq = theta ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    return np.asarray(positions, dtype=np.float64)[..., None] * inv_freq


def rope_tables(positions, head_dim: int, theta: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    """``(cos, sin)`` of the rotary angles, shaped to broadcast over heads."""
    ang = rope_angles(positions, head_dim, theta)[..., None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope(x: Tensor, positions, theta: float = 10000.0, tables=None) -> Tensor:
    """Rotate adjacent feature pairs of ``x[..., t, head, :]`` by position.

    ``positions`` has shape ``x.shape[:-2]``: one position per token, shared
    by all heads. ``tables`` may carry precomputed :func:`rope_tables`.
    """
    positions = np.asarray(positions)
    if positions.shape != x.shape[:-2]:
        raise ShapeError(f"rope positions {positions.shape} do not match {x.shape}")
    cos, sin = tables if tables is not None else rope_tables(positions, x.shape[-1], theta, x.dtype)

    def rot(d, sgn):
        e, o = d[..., 0::2], d[..., 1::2]
        out = np.empty_like(d)
        out[..., 0::2] = e * cos - sgn * o * sin
        out[..., 1::2] = sgn * e * sin + o * cos
        return out

    return Tensor._result(rot(x.data, 1), (x,), lambda g: (rot(g, -1),))


def repeat_heads(x: Tensor, n: int, axis: int) -> Tensor:
    """Repeat each slice along ``axis`` ``n`` times (k/v sharing across query heads)."""
    if n == 1:
        return x
    axis = axis % x.ndim
    src = x.shape

    def fn(g):
        gs = g.reshape(src[:axis] + (src[axis], n) + src[axis + 1 :])
        return (gs.sum(axis=axis + 1),)

    return Tensor._result(np.repeat(x.data, n, axis=axis), (x,), fn)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity unless ``train`` and ``p > 0``."""
    if not train or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    keep = (rng.random(x.shape, dtype=np.float32) >= p).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return Tensor._result(x.data * keep, (x,), lambda g: (g * keep,))


def cross_entropy(logits: Tensor, targets, mask=None, reduction: str = "mean") -> Tensor:
    """Token-level cross-entropy over rows with ``mask == 1``.

    ``reduction="mean"`` averages over the selected rows, ``"sum"`` adds them.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [t, V] logits, got {logits.shape}")
    n, vocab = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask).astype(bool)
    if targets.shape != (n,) or mask.shape != (n,):
        raise ShapeError("cross_entropy: targets/mask must have one entry per row")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy: mask selects no positions")
    sel = np.flatnonzero(mask)
    tsel = targets[sel]
    if tsel.min() < 0 or tsel.max() >= vocab:
        raise IndexError(f"cross_entropy: target id out of range [0, {vocab})")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    z = logits.data[sel]
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    se = e.sum(axis=1, keepdims=True)
    lse = (np.log(se) + zmax)[:, 0]
    losses = lse - z[np.arange(count), tsel]
    w = 1.0 / count if reduction == "mean" else 1.0
    total = np.asarray(losses.sum() * w, dtype=logits.dtype)

    def fn(g):
        p = e / se
        p[np.arange(count), tsel] -= 1.0
        gl = np.zeros(logits.shape, dtype=logits.dtype)
        gl[sel] = p * (g * w)
        return (gl,)

    return Tensor._result(total, (logits,), fn)


class AdamWState:
    """Moment buffers and step count for :func:`adamw_step`."""

    def __init__(self, params: dict[str, Tensor]):
        self.step = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One AdamW update in place, with bias correction and decoupled decay."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ShapeError(f"adamw: shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        if weight_decay:
            p.data *= p.dtype.type(1.0 - lr * weight_decay)
        step = (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= (lr * step).astype(p.dtype, copy=False)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(np.sum([np.sum(g.astype(np.float64) ** 2) for g in grads.values()])))
    if max_norm > 0 and total > max_norm:
        f = max_norm / (total + 1e-6)
        for g in grads.values():
            g *= g.dtype.type(f)
    return total


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-3,
) -> list[float]:
    """Compare analytic gradients of ``fn`` against central differences.

    Runs in float64. Returns, per input, the max-abs relative error
    ``max|analytic - numeric| / max|numeric|``.
    """
    with shadow64():
        leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in inputs]
        backward(fn(*leaves))
        analytic = [
            t.grad if t.grad is not None else np.zeros_like(t.data) for t in leaves
        ]
        errors = []
        with no_grad():
            for t, ga in zip(leaves, analytic):
                num = np.zeros_like(t.data)
                flat = t.data.reshape(-1)
                nflat = num.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + eps
                    fp = float(fn(*leaves).data)
                    flat[i] = orig - eps
                    fm = float(fn(*leaves).data)
                    flat[i] = orig
                    nflat[i] = (fp - fm) / (2 * eps)
                denom = max(float(np.max(np.abs(num))), 1e-12)
                errors.append(float(np.max(np.abs(ga - num))) / denom)
    return errors
