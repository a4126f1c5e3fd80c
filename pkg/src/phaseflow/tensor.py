"""Dense tensors with reverse-mode automatic differentiation on a per-pass tape.

Every numeric module in this package computes on :class:`Tensor`. Operations
record themselves onto the currently active :class:`Tape` (creation order is
topological order); :func:`backward` replays the tape strictly in reverse and
sums gradients across consumers. When no tape is active the same ops run as
plain numpy, which is the inference fast path.

Tests and gradient checks run at float64; training may switch to float32 via
config. There is no support for higher-order gradients: a tape is recorded,
consumed by one backward pass, and freed.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class RankError(ValueError):
    """Raised when an operand has the wrong rank (e.g. non-scalar loss)."""


class EvaluationError(RuntimeError):
    """Raised when a numeric evaluation produced a non-finite result."""


class Node:
    """One recorded primitive: output, parent handles, local-gradient closure."""

    __slots__ = ("out", "parents", "vjp")

    def __init__(self, out: "Tensor", parents: tuple["Tensor", ...], vjp: Callable):
        self.out = out
        self.parents = parents
        self.vjp = vjp


class Tape:
    """Ordered record of primitive ops for one forward pass.

    Usage::

        with Tape() as tape:
            loss = model(...)
            grads = tape.backward(loss, params)
    """

    current: Optional["Tape"] = None

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        if Tape.current is not None:
            raise RuntimeError("tapes do not nest; one tape per forward pass")
        Tape.current = self
        return self

    def __exit__(self, *exc) -> None:
        Tape.current = None

    def record(self, out: "Tensor", parents: tuple["Tensor", ...], vjp: Callable) -> None:
        out.tape_id = len(self.nodes)
        self.nodes.append(Node(out, parents, vjp))

    def backward(
        self, loss: "Tensor", params: Optional[Iterable["Tensor"]] = None
    ) -> dict["Tensor", np.ndarray]:
        """Accumulate d(loss)/d(leaf) for every tracked leaf; free the tape.

        Returns a map from leaf tensor to its gradient array. Leaves listed in
        ``params`` that the computation never touched get explicit zeros.
        """
        if loss.shape != ():
            raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not np.isfinite(loss.data):
            raise EvaluationError("loss is not finite")

        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
        owned: set[int] = set()
        by_id: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            owned.discard(id(node.out))
            parent_grads = node.vjp(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key not in grads:
                    grads[key] = pg  # borrowed: vjp outputs may alias g
                    by_id[key] = parent
                elif key in owned:
                    grads[key] += pg
                else:
                    grads[key] = grads[key] + pg
                    owned.add(key)

        out: dict[Tensor, np.ndarray] = {}
        for key, g in grads.items():
            t = by_id[key]
            if t.is_leaf():
                t.grad = np.asarray(g, dtype=t.dtype).reshape(t.shape)
                out[t] = t.grad
        if params is not None:
            for p in params:
                if p not in out:
                    p.grad = np.zeros(p.shape, dtype=p.dtype)
                    out[p] = p.grad
        self.nodes.clear()
        return out


def tracing() -> bool:
    return Tape.current is not None


ArrayLike = Union[np.ndarray, float, int, Sequence]


class Tensor:
    """Dense n-dimensional array of reals, optionally tracked on the tape."""

    __slots__ = ("data", "requires_grad", "grad", "tape_id", "name")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype: Optional[np.dtype] = None,
        name: Optional[str] = None,
    ):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.tape_id: Optional[int] = None
        self.name = name

    # -- introspection -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def is_leaf(self) -> bool:
        return self.tape_id is None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # -- operators -----------------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x: Union[Tensor, ArrayLike], dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def record_op(
    out_data: np.ndarray, parents: tuple[Tensor, ...], vjp: Callable
) -> Tensor:
    """Wrap a primitive's result, recording it if any parent is tracked.

    ``vjp(grad_out) -> tuple`` returns one gradient array (or None) per parent.
    This is the extension point custom primitives (e.g. the SSM scan) use.
    """
    out = Tensor(out_data)
    tape = Tape.current
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad down to ``shape`` (inverse of numpy's trailing-axis broadcast)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# -- arithmetic ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record_op(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record_op(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record_op(out, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return record_op(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record_op(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Matrix product; leading axes broadcast as in ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = (_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
              if a.requires_grad else None)
        gb = (_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
              if b.requires_grad else None)
        return ga, gb

    return record_op(out, (a, b), vjp)


# -- shape manipulation --------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    out = a.data.reshape(shape)
    return record_op(out, (a,), lambda g: (g.reshape(old),))


def swap_last_axes(a) -> Tensor:
    a = as_tensor(a)
    out = np.swapaxes(a.data, -1, -2)
    return record_op(out, (a,), lambda g: (np.swapaxes(g, -1, -2),))


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)


def take(a, idx) -> Tensor:
    """Slicing/indexing; gradient scatters back into zeros."""
    a = as_tensor(a)
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def vjp(g):
        ga = np.zeros(a.shape, dtype=a.dtype)
        if basic:
            ga[idx] += g  # basic indexing never aliases
        else:
            np.add.at(ga, idx, g)
        return (ga,)

    return record_op(out, (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return record_op(out, tuple(tensors), vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    return record_op(out, tuple(tensors), vjp)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return record_op(out, (a,), vjp)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    denom = a.size / max(out.size, 1)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / denom, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / denom, a.shape).copy(),)

    return record_op(out, (a,), vjp)


# -- elementwise nonlinearities -------------------------------------------------


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return record_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)
    return record_op(out, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return record_op(out, (a,), lambda g: (g * 0.5 / out,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return record_op(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # branch-free stable form: exp of a non-positive argument only
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return record_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a) -> Tensor:
    """x * sigmoid(x)."""
    a = as_tensor(a)
    s = _sigmoid(a.data)
    out = a.data * s
    return record_op(out, (a,), lambda g: (g * (s + out * (1.0 - s)),))


def softplus(a) -> Tensor:
    """ln(1 + e^x), computed as logaddexp(0, x) so large x degrades to x."""
    a = as_tensor(a)
    out = np.logaddexp(np.zeros((), dtype=a.dtype), a.data)
    return record_op(out, (a,), lambda g: (g * _sigmoid(a.data),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return record_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes through the interior (inclusive)."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = ((a.data >= lo) & (a.data <= hi)).astype(a.dtype)
    return record_op(out, (a,), lambda g: (g * inside,))


# -- fused reductions -----------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``; rows sum to 1."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return record_op(out, (a,), vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return record_op(out, (a,), vjp)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ShapeError("layer_norm needs a non-empty last axis")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        gx = dgain = dbias = None
        lead = tuple(range(x.ndim - 1))
        if x.requires_grad:
            gg = g * gain.data
            gx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                        - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            dgain = _unbroadcast((g * xhat).sum(axis=lead), gain.shape)
        if bias.requires_grad:
            dbias = _unbroadcast(g.sum(axis=lead), bias.shape)
        return gx, dgain, dbias

    return record_op(out, (x, gain, bias), vjp)


def embedding(table, idx) -> Tensor:
    """Row lookup ``table[idx]``; gradient scatter-adds into the table."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    out = table.data[idx]

    def vjp(g):
        gt = np.zeros(table.shape, dtype=table.dtype)
        np.add.at(gt, idx, g)
        return (gt,)

    return record_op(out, (table,), vjp)


# -- composites ----------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: x @ w (+ b), any leading shape.

    Fused primitive: one tape node instead of reshape/matmul/add chains.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear inner dimensions disagree: {x.shape} @ {w.shape}")
    lead = x.shape[:-1]
    d_in, d_out = w.shape
    flat = x.data.reshape(-1, d_in)
    out = flat @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(lead + (d_out,))
    parents = (x, w) if b is None else (x, w, b)

    def vjp(g):
        gf = g.reshape(-1, d_out)
        gx = (gf @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = flat.T @ gf if w.requires_grad else None
        if b is None:
            return gx, gw
        gb = gf.sum(axis=0).reshape(b.shape) if b.requires_grad else None
        return gx, gw, gb

    return record_op(out, parents, vjp)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    n = sqrt(tsum(square(x), axis=axis, keepdims=True) + eps)
    return div(x, n)


def backward(
    loss: Tensor, params: Optional[Iterable[Tensor]] = None
) -> dict[Tensor, np.ndarray]:
    """Run reverse-mode accumulation on the active tape."""
    tape = Tape.current
    if tape is None:
        raise RuntimeError("backward requires an active Tape")
    return tape.backward(loss, params)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_coords: int = 100,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` recomputes the scalar loss from the current parameter values. Up to
    ``max_coords`` coordinates are sampled per parameter. Relative error is
    |analytic - fd| / max(|analytic|, |fd|, 1e-8).
    """
    if step <= 0:
        raise ValueError("grad_check step must be positive")
    rng = rng or np.random.default_rng(0)
    with Tape() as tape:
        loss = f()
        if not np.isfinite(loss.data):
            raise EvaluationError("grad_check loss is not finite")
        grads = tape.backward(loss, params)

    worst = 0.0
    for p in params:
        analytic = grads[p]
        n = p.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        flat = p.data.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            hi = f().item()
            flat[c] = orig - step
            lo = f().item()
            flat[c] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise EvaluationError("grad_check perturbation produced non-finite loss")
            fd = (hi - lo) / (2.0 * step)
            an = float(analytic.reshape(-1)[c])
            err = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst
