"""Dense 2-D tensors with tape-based reverse-mode differentiation.

Every value is a float64 matrix.  Operations executed while a :class:`Tape`
is active are recorded whenever one of their inputs requires a gradient;
outside a tape they only compute values, which is what inference uses.

    >>> w = Tensor([[1.0], [2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(matmul(Tensor([[3.0, 4.0]]), w))
    >>> tape.backward(loss, [w])[w].ravel().tolist()
    [3.0, 4.0]
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772
LOG_FLOOR = 1e-12
LAYER_NORM_EPS = 1e-5

_reduce_sum = np.add.reduce


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


def _first_bad_index(arr: np.ndarray) -> tuple[int, ...]:
    bad = np.argwhere(~np.isfinite(arr))
    return tuple(int(i) for i in bad[0])


class Tensor:
    """A float64 matrix that may take part in a recorded computation."""

    __slots__ = ("data", "requires_grad", "node_id", "name", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D matrices, got an array with ndim={arr.ndim}")
        if arr.size == 0:
            raise ShapeError(f"tensors need positive rows and cols, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite input value at index {_first_bad_index(arr)}")
        self.data = arr
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.name = name
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, kind: str) -> "Tensor":
        # one reduction catches any nan/inf; the full scan runs only when it fires
        if not math.isfinite(_reduce_sum(arr, None)) and not np.isfinite(arr).all():
            raise NonFiniteError(f"{kind} produced a non-finite value at index {_first_bad_index(arr)}")
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = False
        out.node_id = None
        out.name = None
        out._tape = None
        return out

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, "detach")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; scalars are promoted to constant 1x1 tensors
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return elemwise_mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape

_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of operations; supports exactly one backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], vjp) -> None:
        if self.consumed:
            raise TapeError("cannot record onto a tape that already ran backward")
        out.node_id = len(self.nodes)
        out._tape = self
        out.requires_grad = True
        self.nodes.append(_Node(out, parents, vjp))

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Gradients of a scalar ``loss`` with respect to leaf tensors.

        When ``params`` is given the map holds exactly those tensors, with
        zeros for any the loss does not depend on.
        """
        if loss.shape != (1, 1):
            raise ShapeError(f"backward needs a 1x1 loss, got shape {loss.shape}")
        if loss._tape is not self or loss.node_id is None:
            raise TapeError("loss was not recorded on this tape")
        if self.consumed:
            raise TapeError("backward already ran on this tape")
        self.consumed = True

        node_grads: list[np.ndarray | None] = [None] * (loss.node_id + 1)
        node_grads[loss.node_id] = np.ones((1, 1))
        leaf_grads: dict[int, np.ndarray] = {}
        leaves: dict[int, Tensor] = {}
        for i in range(loss.node_id, -1, -1):
            g = node_grads[i]
            if g is None:
                continue
            node = self.nodes[i]
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._tape is self and parent.node_id is not None:
                    j = parent.node_id
                    node_grads[j] = pg if node_grads[j] is None else node_grads[j] + pg
                else:
                    k = id(parent)
                    leaves[k] = parent
                    leaf_grads[k] = pg if k not in leaf_grads else leaf_grads[k] + pg
            node_grads[i] = None

        if params is None:
            return {leaves[k]: g for k, g in leaf_grads.items()}
        out = {}
        for p in params:
            g = leaf_grads.get(id(p))
            out[p] = np.zeros_like(p.data) if g is None else g
        return out


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    if loss._tape is None:
        raise TapeError("loss is not on any tape; run the forward pass inside `with Tape():`")
    return loss._tape.backward(loss, params)


def _result(arr: np.ndarray, kind: str, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor._wrap(arr, kind)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        tape.record(out, parents, vjp)
    return out


# ---------------------------------------------------------------------------
# operations


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        return
    for ax in (0, 1):
        m, n = sa[ax], sb[ax]
        if m != n and m != 1 and n != 1:
            raise ShapeError(f"{kind}: shapes {sa} and {sb} are incompatible along axis {ax}")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    if A.shape[1] != B.shape[0]:
        raise ShapeError(f"matmul: ({a.shape[0]}x{a.shape[1]}) @ ({b.shape[0]}x{b.shape[1]}) inner dims differ")
    return _result(A @ B, "matmul", (a, b), lambda g: (g @ B.T, A.T @ g))


def affine(x, w, b) -> Tensor:
    """``x @ w + b`` with a 1-row bias, as a single tape node."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    X, W, B = x.data, w.data, b.data
    if X.shape[1] != W.shape[0] or B.shape != (1, W.shape[1]):
        raise ShapeError(f"affine: ({X.shape[0]}x{X.shape[1]}) @ {W.shape} + {B.shape} do not fit")
    return _result(X @ W + B, "affine", (x, w, b), lambda g: (g @ W.T, X.T @ g, g.sum(axis=0, keepdims=True)))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.data.shape, b.data.shape
    return _result(a.data + b.data, "add", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.data.shape, b.data.shape
    return _result(a.data - b.data, "sub", (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def elemwise_mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("elemwise_mul", a, b)
    A, B = a.data, b.data
    return _result(
        A * B, "elemwise_mul", (a, b),
        lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    if np.any(b.data == 0):
        raise ZeroDivisionError(f"div: zero divisor at index {tuple(int(i) for i in np.argwhere(b.data == 0)[0])}")
    A, B = a.data, b.data
    out = A / B
    return _result(
        out, "div", (a, b),
        lambda g: (_unbroadcast(g / B, A.shape), _unbroadcast(-g * out / B, B.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * c, "scale", (a,), lambda g: (g * c,))


def concat_rows(*tensors) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    cols = {t.shape[1] for t in ts}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows: column counts differ {[t.shape for t in ts]}")
    bounds = np.cumsum([0] + [t.shape[0] for t in ts])

    def vjp(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(ts)))

    return _result(np.concatenate([t.data for t in ts], axis=0), "concat_rows", tuple(ts), vjp)


def concat_cols(*tensors) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    rows = {t.shape[0] for t in ts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ {[t.shape for t in ts]}")
    bounds = np.cumsum([0] + [t.shape[1] for t in ts])

    def vjp(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(ts)))

    return _result(np.concatenate([t.data for t in ts], axis=1), "concat_cols", tuple(ts), vjp)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.T.copy(), "transpose", (a,), lambda g: (g.T,))


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    n = a.shape[0]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for {n} rows")

    def vjp(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _result(a.data[start:stop].copy(), "slice_rows", (a,), vjp)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    n = a.shape[1]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice_cols: [{start}:{stop}] out of range for {n} cols")

    def vjp(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _result(a.data[:, start:stop].copy(), "slice_cols", (a,), vjp)


def gather_cols(a, index: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= a.shape[1]:
        raise ShapeError(f"gather_cols: indices out of range for {a.shape[1]} cols")

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (slice(None), idx), g)
        return (full,)

    return _result(a.data[:, idx], "gather_cols", (a,), vjp)


def row_softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    return _result(y, "row_softmax", (a,), lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),))


def selu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    neg = SELU_LAMBDA * SELU_ALPHA * np.expm1(np.minimum(x, 0.0))
    y = np.where(x > 0, SELU_LAMBDA * x, neg)
    dy = np.where(x > 0, SELU_LAMBDA, neg + SELU_LAMBDA * SELU_ALPHA)
    return _result(y, "selu", (a,), lambda g: (g * dy,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _result(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _result(y, "sigmoid", (a,), lambda g: (g * y * (1.0 - y),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _result(y, "exp", (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    """Natural log of ``max(x, 1e-12)``; the clamped region has zero gradient."""
    a = as_tensor(a)
    x = a.data
    live = x > LOG_FLOOR
    safe = np.where(live, x, LOG_FLOOR)
    return _result(np.log(safe), "log", (a,), lambda g: (np.where(live, g / safe, 0.0),))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.data)
    return _result(np.abs(a.data), "abs", (a,), lambda g: (g * s,))


def clamp_min(a, lo: float) -> Tensor:
    a = as_tensor(a)
    live = a.data > lo
    return _result(np.where(live, a.data, lo), "clamp_min", (a,), lambda g: (g * live,))


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _result(np.array([[a.data.sum()]]), "sum_all", (a,), lambda g: (np.full(shape, g[0, 0]),))


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.data.size
    return _result(np.array([[a.data.mean()]]), "mean_all", (a,), lambda g: (np.full(shape, g[0, 0] / n),))


def row_sums(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _result(a.data.sum(axis=1, keepdims=True), "row_sums", (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def l2_row_norms(a) -> Tensor:
    """K x 1 Euclidean row norms; the gradient at a zero row is defined as 0."""
    a = as_tensor(a)
    x = a.data
    n = np.sqrt((x * x).sum(axis=1, keepdims=True))
    safe = np.where(n > 0, n, 1.0)
    return _result(n, "l2_row_norms", (a,), lambda g: (np.where(n > 0, g * x / safe, 0.0),))


def cumprod_cols(a) -> Tensor:
    """Running product along each row: out[:, j] = prod(a[:, :j+1])."""
    a = as_tensor(a)
    x = a.data
    y = np.cumprod(x, axis=1)
    n = x.shape[1]

    def vjp(g):
        gx = np.zeros_like(x)
        for k in range(n):
            # d out[:, j] / d x[:, k] = prod over i <= j, i != k, for j >= k
            left = np.prod(x[:, :k], axis=1) if k else np.ones(x.shape[0])
            run = left.copy()
            for j in range(k, n):
                if j > k:
                    run = run * x[:, j]
                gx[:, k] += g[:, j] * run
        return (gx,)

    return _result(y, "cumprod_cols", (a,), vjp)


def layer_norm(a) -> Tensor:
    """Per-row standardization (x - mean) / sqrt(var + eps), no affine part."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + LAYER_NORM_EPS)
    xhat = xc * inv

    def vjp(g):
        gm = g.mean(axis=1, keepdims=True)
        gxm = (g * xhat).mean(axis=1, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _result(xhat, "layer_norm", (a,), vjp)


def multihead_attention(q, k, v, heads: int) -> Tensor:
    """Scaled dot-product attention over column blocks of q, k, v.

    Head h uses columns [h*dh, (h+1)*dh); outputs are concatenated back in
    the same column order.  Equivalent to slicing, row_softmax and matmul
    per head, fused into one node.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    n, d = q.shape
    if k.shape != (n, d) or v.shape != (n, d):
        raise ShapeError(f"multihead_attention: q {q.shape}, k {k.shape}, v {v.shape} must match")
    if d % heads:
        raise ShapeError(f"multihead_attention: width {d} not divisible by {heads} heads")
    dh = d // heads
    c = 1.0 / math.sqrt(dh)
    split = lambda x: x.reshape(n, heads, dh).transpose(1, 0, 2)  # heads x n x dh
    Q, K, V = split(q.data), split(k.data), split(v.data)
    S = np.matmul(Q, K.transpose(0, 2, 1)) * c
    S -= S.max(axis=2, keepdims=True)
    A = np.exp(S)
    A /= A.sum(axis=2, keepdims=True)
    out = np.matmul(A, V).transpose(1, 0, 2).reshape(n, d)

    def vjp(g):
        G = split(g)
        dV = np.matmul(A.transpose(0, 2, 1), G)
        dA = np.matmul(G, V.transpose(0, 2, 1))
        dS = A * (dA - (dA * A).sum(axis=2, keepdims=True)) * c
        dQ = np.matmul(dS, K)
        dK = np.matmul(dS.transpose(0, 2, 1), Q)
        merge = lambda x: x.transpose(1, 0, 2).reshape(n, d)
        return merge(dQ), merge(dK), merge(dV)

    return _result(out, "multihead_attention", (q, k, v), vjp)


OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "affine": affine,
    "add": add,
    "sub": sub,
    "elemwise_mul": elemwise_mul,
    "div": div,
    "concat_rows": concat_rows,
    "concat_cols": concat_cols,
    "transpose": transpose,
    "slice_rows": slice_rows,
    "slice_cols": slice_cols,
    "gather_cols": gather_cols,
    "row_softmax": row_softmax,
    "selu": selu,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "abs": abs_,
    "clamp_min": clamp_min,
    "mean_all": mean_all,
    "sum_all": sum_all,
    "row_sums": row_sums,
    "l2_row_norms": l2_row_norms,
    "cumprod_cols": cumprod_cols,
    "layer_norm": layer_norm,
    "scale": scale,
    "multihead_attention": multihead_attention,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op {kind!r}; known: {sorted(OPS)}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# optimization


@dataclass
class AdamState:
    lr: float = 2e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Tensor], grads: dict[Tensor, np.ndarray], state: AdamState) -> Sequence[Tensor]:
    """One Adam update in place, with decoupled weight decay applied first."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p in params:
        g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"adam: gradient shape {g.shape} does not match parameter {p.data.shape}")
        k = id(p)
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
        v = state.v[k]
        if state.weight_decay:
            p.data -= state.lr * state.weight_decay * p.data
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


class Adam:
    def __init__(self, params: Sequence[Tensor], **hyper):
        self.params = list(params)
        self.state = AdamState(**hyper)

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        adam_step(self.params, grads, self.state)


# ---------------------------------------------------------------------------
# finite differences


def _value(out) -> float:
    return out.item() if isinstance(out, Tensor) else float(out)


def finite_difference_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max over all parameter entries of |analytic - central| / max(1, |analytic|).

    ``f`` reads the current parameter values and returns a scalar.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-7, 1e-3]")
    with Tape() as tape:
        loss = f()
    grads = tape.backward(loss, params)
    base = _value(f())
    if base != _value(f()) or base != loss.item():
        raise RuntimeError("f is not deterministic: repeated evaluations differ")
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        ga = grads[p].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = _value(f())
            flat[i] = orig - h
            down = _value(f())
            flat[i] = orig
            fd = (up - down) / (2.0 * h)
            worst = max(worst, abs(ga[i] - fd) / max(1.0, abs(ga[i])))
    return worst
