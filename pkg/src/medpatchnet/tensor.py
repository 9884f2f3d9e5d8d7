"""Dense float64 tensors with define-by-run reverse-mode autodiff.

Every operation builds a fresh graph node holding the saved activations
its backward rule needs.  ``Tensor.backward`` walks the graph in reverse
topological order and accumulates (``+=``) into ``.grad`` of every leaf
that requires it.  Gradients are never reset implicitly; call
``zero_grad`` between optimizer steps.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union[np.ndarray, Sequence, float, int]


class NonFiniteError(ValueError):
    """Raised when a tensor would hold NaN or Inf."""


class GraphError(RuntimeError):
    """Raised on misuse of the autodiff graph (non-scalar backward, reuse)."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[Callable[[np.ndarray], None]] = None,
        _op: str = "leaf",
    ):
        arr = np.asarray(data, dtype=np.float64, order="C")
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values produced by op '{_op}'")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        self._consumed = False

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise GraphError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # ---------------------------------------------------------------- backward
    def backward(self) -> None:
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphError("backward() already called on this graph; rebuild it with a new forward pass")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    node._accumulate(g)
                continue
            if node._backward is None:
                raise GraphError(f"graph through op '{node._op}' was already consumed by an earlier backward()")
            if node.requires_grad:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    if id(parent) in grads:
                        grads[id(parent)] = grads[id(parent)] + pg
                    else:
                        grads[id(parent)] = pg
        self._consumed = True
        for node in order:
            node._backward = None if node._parents else node._backward

    # -------------------------------------------------------------- operators
    def __add__(self, other: "Tensor | float") -> "Tensor":
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other: "Tensor | float") -> "Tensor":
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other: "Tensor | float") -> "Tensor":
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)

    def __getitem__(self, index) -> "Tensor":
        return take(self, index)

    def sum(self, axis: Optional[int | Tuple[int, ...]] = None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis: Optional[int | Tuple[int, ...]] = None) -> "Tensor":
        return tmean(self, axis)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_not_scalar(t: Tensor) -> float:
    raise GraphError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x: "Tensor | ArrayLike") -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Tuple[Tensor, ...], backward, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (), _backward=backward if needs else None, _op=op)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise
def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def power(a: Tensor, exponent: float) -> Tensor:
    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _make(a.data**exponent, (a,), backward, "pow")


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(x, 0)``; the gradient passes only where ``x > 0``."""
    active = x.data > 0

    def backward(g):
        return (g * active,)

    return _make(np.where(active, x.data, 0.0), (x,), backward, "relu")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _make(s, (x,), backward, "sigmoid")


def sigmoid_np(x: ArrayLike) -> np.ndarray:
    """Numerically stable logistic function on plain arrays."""
    arr = np.asarray(x, dtype=np.float64)
    return _stable_sigmoid(np.atleast_1d(arr)).reshape(arr.shape)


# ----------------------------------------------------------------- reductions
def _norm_axes(axis, ndim) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def tsum(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.ndim)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape).copy(),)

    return _make(x.data.sum(axis=axes), (x,), backward, "sum")


def tmean(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes) / count, x.shape).copy(),)

    return _make(x.data.mean(axis=axes), (x,), backward, "mean")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def take(x: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), backward, "getitem")


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


# ---------------------------------------------------------------- layers
def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape [B, F] and weight [O, F]."""
    if x.ndim != 2 or weight.ndim != 2 or bias.ndim != 1:
        raise ValueError(f"linear expects x[B,F], weight[O,F], bias[O]; got {x.shape}, {weight.shape}, {bias.shape}")
    if x.shape[1] != weight.shape[1] or bias.shape[0] != weight.shape[0]:
        raise ValueError(
            f"linear shape mismatch: x has {x.shape[1]} features, weight is {weight.shape}, bias is {bias.shape}"
        )

    def backward(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _make(x.data @ weight.data.T + bias.data, (x, weight, bias), backward, "linear")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects [B,C,H,W], got {x.shape}")
    b, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ValueError("global_avg_pool needs H, W >= 1")

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _make(x.data.mean(axis=(2, 3)), (x,), backward, "global_avg_pool")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input via patch unfolding and a matrix product."""
    if x.ndim != 4 or weight.ndim != 4 or bias.ndim != 1:
        raise ValueError(
            f"conv2d expects input[B,Cin,H,W], weight[Cout,Cin,kh,kw], bias[Cout]; "
            f"got {x.shape}, {weight.shape}, {bias.shape}"
        )
    b, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d channel mismatch: input has {cin} channels, weight expects {wcin}")
    if bias.shape[0] != cout:
        raise ValueError(f"conv2d bias has {bias.shape[0]} entries, weight has {cout} output channels")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d needs stride >= 1 and padding >= 0, got stride={stride}, padding={padding}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")

    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    # unfold in NHWC so each row of ``cols`` is one (kh, kw, cin) window
    xh = x.data.transpose(0, 2, 3, 1)
    if padding:
        xh = np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    hp, wp = xh.shape[1], xh.shape[2]
    tiled = stride == kh and stride == kw and hp == ho * kh and wp == wo * kw
    if tiled:
        cols = xh.reshape(b, ho, kh, wo, kw, cin).transpose(0, 1, 3, 2, 4, 5)
    else:
        win = np.lib.stride_tricks.sliding_window_view(xh, (kh, kw), axis=(1, 2))
        win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
        cols = win.transpose(0, 1, 2, 4, 5, 3)
    cols = cols.reshape(b * ho * wo, kh * kw * cin)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(cout, kh * kw * cin)
    out = (cols @ wmat.T + bias.data).reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, cout)
        gw = (gmat.T @ cols).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
        gb = gmat.sum(axis=0)
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(b, ho, wo, kh, kw, cin)
            if tiled:
                gxh = gcols.transpose(0, 1, 3, 2, 4, 5).reshape(b, hp, wp, cin)
            else:
                gxh = np.zeros((b, hp, wp, cin))
                for i in range(kh):
                    for j in range(kw):
                        gxh[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += gcols[
                            :, :, :, i, j
                        ]
            if padding:
                gxh = gxh[:, padding : padding + h, padding : padding + w]
            gx = gxh.transpose(0, 3, 1, 2)
        return gx, gw, gb

    return _make(out, (x, weight, bias), backward, "conv2d")


def bce_with_logits(logits: Tensor, targets: "Tensor | ArrayLike") -> Tensor:
    """Mean binary cross-entropy on raw logits, ``max(x,0) - x*t + log1p(exp(-|x|))``."""
    logits = _as_tensor(logits)
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ValueError(f"bce_with_logits shape mismatch: logits {logits.shape}, targets {t.shape}")
    if not np.isin(t, (0.0, 1.0)).all():
        raise ValueError("bce_with_logits targets must be binary (0 or 1)")
    x = logits.data
    loss = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    n = x.size

    def backward(g):
        return (g * (_stable_sigmoid(x) - t) / n,)

    return _make(np.asarray(loss.mean()), (logits,), backward, "bce_with_logits")


def parameters_grad_zero(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
