"""A small reverse-mode autodiff engine over dense float64 numpy arrays.

Only what the model needs: elementwise math with numpy broadcasting, batched
matmul, gathers/scatters keyed by integer index arrays, and masked or
segment-wise softmax.  Every op checks its output for NaN/Inf.
"""

from __future__ import annotations

import contextlib
import json
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite value produced by {op}")
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, op=op)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),), "power")


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(a.data)
    return _make(y, (a,), lambda g: (g / a.data,), "log")


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    y = np.logaddexp(0.0, a.data)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(y, (a,), lambda g: (g * s,), "softplus")


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, slope * a.data), (a,), lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


def gelu(a) -> Tensor:
    """Sigmoid approximation x * sigmoid(1.702 x); smooth everywhere."""
    return mul(a, sigmoid(scale(a, 1.702)))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def masked_fill(a, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true with a constant (no gradient flows there)."""
    a = as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    return _make(np.where(mask, value, a.data), (a,), lambda g: (np.where(mask, 0.0, g),), "masked_fill")


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(y), (a,), back, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[x] for x in np.atleast_1d(axis)])
    return scale(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, back, "concat")


def split(a, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    a = as_tensor(a)
    out, start = [], 0
    for s in sizes:
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(start, start + s)
        out.append(getitem(a, tuple(idx)))
        start += s
    return out


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.asarray(a.data[idx]), (a,), back, "getitem")


def take(table, idx) -> Tensor:
    """Row gather along axis 0 (embedding lookup)."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape((-1,) + table.shape[1:]))
        return (full,)

    return _make(table.data[idx], (table,), back, "take")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 1:
        raise ValueError("matmul needs a matrix on the left")
    if a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    y = a.data @ b.data

    def back(g):
        if b.ndim == 1:
            ga = g[..., None] * b.data
            gb = np.tensordot(g, a.data, axes=(tuple(range(g.ndim)), tuple(range(a.ndim - 1))))
            return ga, gb
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(y, (a, b), back, "matmul")


# ---------------------------------------------------------------------------
# softmax family


def softmax(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is false get exactly zero weight."""
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        m = np.where(mask, x, -np.inf).max(axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.where(mask, np.exp(np.where(mask, x - m, 0.0)), 0.0)
    else:
        e = np.exp(x - x.max(axis=axis, keepdims=True))
    s = e.sum(axis=axis, keepdims=True)
    y = e / np.where(s > 0, s, 1.0)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), back, "softmax")


def _segment_max(x: np.ndarray, seg: np.ndarray, n: int) -> np.ndarray:
    m = np.full(n, -np.inf)
    np.maximum.at(m, seg, x)
    return m


def segment_sum(a, seg: np.ndarray, n: int) -> Tensor:
    """Scatter-add rows of ``a`` into ``n`` buckets given by ``seg``."""
    a = as_tensor(a)
    seg = np.asarray(seg, dtype=np.int64)
    out = np.zeros((n,) + a.shape[1:])
    np.add.at(out, seg, a.data)
    return _make(out, (a,), lambda g: (g[seg],), "segment_sum")


def segment_softmax(a, seg: np.ndarray, n: int) -> Tensor:
    """Softmax of a 1-d array within groups ``seg`` (values in 0..n-1)."""
    a = as_tensor(a)
    seg = np.asarray(seg, dtype=np.int64)
    m = _segment_max(a.data, seg, n)
    e = np.exp(a.data - m[seg])
    s = np.zeros(n)
    np.add.at(s, seg, e)
    y = e / s[seg]

    def back(g):
        gy = np.zeros(n)
        np.add.at(gy, seg, g * y)
        return (y * (g - gy[seg]),)

    return _make(y, (a,), back, "segment_softmax")


def segment_log_softmax(a, seg: np.ndarray, n: int) -> Tensor:
    a = as_tensor(a)
    seg = np.asarray(seg, dtype=np.int64)
    m = _segment_max(a.data, seg, n)
    e = np.exp(a.data - m[seg])
    s = np.zeros(n)
    np.add.at(s, seg, e)
    y = a.data - m[seg] - np.log(s[seg])
    p = np.exp(y)

    def back(g):
        gs = np.zeros(n)
        np.add.at(gs, seg, g)
        return (g - p * gs[seg],)

    return _make(y, (a,), back, "segment_log_softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    mu = mean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = mean(mul(xc, xc), axis=-1, keepdims=True)
    return add(mul(mul(xc, power(add(var, eps), -0.5)), gain), bias)


# ---------------------------------------------------------------------------
# backward


def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: "ParamStore | None" = None) -> "OrderedDict[str, np.ndarray] | None":
    """Accumulate d(loss)/d(node) into ``.grad`` of every leaf that requires grad.

    With ``params`` given, returns gradients in store order; parameters the loss
    does not reach get zeros.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is not None:
        params.zero_grad()
    if loss.requires_grad:
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(_topo(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                g = _unbroadcast(np.asarray(g), node.data.shape).reshape(node.data.shape)
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, gp in zip(node._parents, node._backward(g)):
                if gp is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + gp
                else:
                    grads[key] = np.array(gp, dtype=np.float64, copy=True)
    if params is None:
        return None
    return OrderedDict((name, t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in params.items())


# ---------------------------------------------------------------------------
# parameters


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape if shape is not None else (fan_in, fan_out))


def embedding_init(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(1.0 / dim), size=(rows, dim))


class ParamStore:
    """Named learnable arrays with deterministic (insertion) order."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, op=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def n_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def snapshot(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data.copy()) for k, t in self._params.items())

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(snap)
        if missing:
            raise KeyError(f"snapshot lacks parameters: {sorted(missing)[:5]}")
        for k, t in self._params.items():
            if snap[k].shape != t.data.shape:
                raise ValueError(f"shape mismatch for {k}: {snap[k].shape} vs {t.data.shape}")
            t.data = np.array(snap[k], dtype=np.float64)


CHECKPOINT_MAGIC = "navtraj-checkpoint-v1"


def save_checkpoint(path: str | Path, arrays: "OrderedDict[str, np.ndarray] | dict", meta: dict | None = None) -> None:
    """Single file: one JSON header line (manifest + meta), then little-endian float64 payload."""
    manifest, offset, chunks = [], 0, []
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        chunks.append(arr.tobytes())
    header = json.dumps({"format": CHECKPOINT_MAGIC, "params": manifest, "meta": meta or {}}, sort_keys=True)
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8") + b"\n")
        for c in chunks:
            fh.write(c)


def load_checkpoint(path: str | Path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl].decode("utf-8"))
    if header.get("format") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    payload = np.frombuffer(raw[nl + 1 :], dtype="<f8")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for entry in header["params"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        chunk = payload[entry["offset"] : entry["offset"] + size]
        if chunk.size != size:
            raise ValueError(f"{path}: truncated payload for {entry['name']}")
        out[entry["name"]] = chunk.reshape(entry["shape"]).astype(np.float64)
    return out, header.get("meta", {})


def numeric_grad(f: Callable[[], float], t: Tensor, index, h: float = 1e-5) -> float:
    """Central difference of scalar ``f`` with respect to one entry of ``t``."""
    old = t.data[index]
    t.data[index] = old + h
    fp = f()
    t.data[index] = old - h
    fm = f()
    t.data[index] = old
    return (fp - fm) / (2 * h)


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: ParamStore,
    h: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative error between analytic and finite-difference gradients.

    Entries whose absolute error is below 1e-7 count as exact.
    """
    grads = backward(loss_fn(), params)
    rng = rng or np.random.default_rng(0)
    worst = 0.0

    def f():
        with no_grad():
            return float(loss_fn().data)

    for name, t in params.items():
        flat = np.arange(t.data.size)
        if max_entries is not None and flat.size > max_entries:
            flat = rng.choice(flat, size=max_entries, replace=False)
        for fi in flat:
            idx = np.unravel_index(fi, t.data.shape)
            num = numeric_grad(f, t, idx, h)
            ana = grads[name][idx]
            err = abs(num - ana)
            if err <= 1e-7:
                continue
            worst = max(worst, err / max(abs(num), abs(ana)))
    return worst


def parameters_reached(loss: Tensor, params: ParamStore) -> set[str]:
    ids = {id(n) for n in _topo(loss)}
    return {name for name, t in params.items() if id(t) in ids}


def stack_rows(rows: Iterable[Tensor]) -> Tensor:
    rows = list(rows)
    return concat([reshape(r, (1,) + r.shape) for r in rows], axis=0)
