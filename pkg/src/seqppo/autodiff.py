"""Small reverse-mode automatic differentiation engine over float64 numpy arrays.

Graphs are define-by-run: every op executed while a :class:`Tape` is active
and touching a differentiable input is appended to that tape.  Creation order
is a valid topological order, so ``Tape.backward`` is a single reverse sweep.
Outside a tape, ops just compute values (this doubles as a no-grad mode for
sampling and evaluation).
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    """Raised as soon as an op produces NaN or Inf."""


class DomainError(ValueError):
    """Raised for log of non-positive values and similar."""


_TAPES: list["Tape | None"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name", "tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in leaf {name or ''}".strip())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn = None
        self.op = "leaf"
        self.name = name
        self.tape = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.tape is None:
            raise RuntimeError("tensor was not produced on a tape")
        self.tape.backward(self)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    __array_priority__ = 100

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Records nodes in creation order and runs the reverse sweep."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        for i in range(len(_TAPES) - 1, -1, -1):
            if _TAPES[i] is self:
                del _TAPES[i]
                break

    @property
    def parameters(self) -> list[Tensor]:
        """Leaf tensors requiring gradients that feed recorded nodes."""
        seen: dict[int, Tensor] = {}
        for node in self.nodes:
            for p in node.parents:
                if p.requires_grad and p.tape is None:
                    seen.setdefault(id(p), p)
        return list(seen.values())

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

        Intermediate gradients are reset on every call; leaf gradients sum
        across calls until cleared by the caller.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self:
            raise RuntimeError("loss was not recorded on this tape")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.grad
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(pg, parent.data.shape)
                parent.grad = pg if parent.grad is None else parent.grad + pg


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


class no_grad:
    """Suspend recording, even inside an active tape."""

    def __enter__(self):
        _TAPES.append(None)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"op '{op}' produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.name = None
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
        out.tape = tape
        tape.nodes.append(out)
    else:
        out.requires_grad = False
        out.parents = ()
        out.backward_fn = None
        out.tape = None
    return out


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# --- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    return _node(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.data, b.data)
    return _node(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    ad, bd = a.data, b.data
    return _node(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * c, "scale", (a,), lambda g: (g * c,))


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("minimum", a.data, b.data)
    take_a = a.data <= b.data
    return _node(np.where(take_a, a.data, b.data), "minimum", (a, b),
                 lambda g: (g * take_a, g * ~take_a))


def clip(x, lo, hi) -> Tensor:
    """Clamp to [lo, hi]; gradient is 1 inside the closed interval and 0 outside."""
    x = as_tensor(x)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if np.any(lo > hi):
        raise ValueError("clip: lower bound exceeds upper bound")
    inside = (x.data >= lo) & (x.data <= hi)
    return _node(np.clip(x.data, lo, hi), "clip", (x,), lambda g: (g * inside,))


# --- nonlinearities -------------------------------------------------------------

def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _node(s, "sigmoid", (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _node(t, "tanh", (x,), lambda g: (g * (1.0 - t * t),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)
    return _node(e, "exp", (x,), lambda g: (g * e,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError(f"log of non-positive value (min {x.data.min():.3g})")
    xd = x.data
    return _node(np.log(xd), "log", (x,), lambda g: (g / xd,))


def softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _node(s, "softmax", (x,), bw)


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _node(out, "log_softmax", (x,), bw)


# --- linear algebra and indexing ---------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ValueError(f"matmul: shape mismatch {ad.shape} vs {bd.shape}")

    def bw(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _node(ad @ bd, "matmul", (a, b), bw)


def gather_rows(table, ids) -> Tensor:
    """``table[ids]`` for integer ids (embedding lookup)."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    n = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"gather_rows: id out of range [0, {n})")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _node(table.data[ids], "gather_rows", (table,), bw)


def pick(x, idx) -> Tensor:
    """Per-row element selection: ``x[i, idx[i]]`` for a 2-D ``x``."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.data.shape[0])
    if idx.shape != rows.shape:
        raise ValueError(f"pick: shape mismatch {x.shape} vs index {idx.shape}")

    def bw(g):
        full = np.zeros_like(x.data)
        full[rows, idx] = g
        return (full,)

    return _node(x.data[rows, idx], "pick", (x,), bw)


def slice_cols(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        return (full,)

    return _node(x.data[..., start:stop], "slice_cols", (x,), bw)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    data = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.data.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(data, "concat", xs, bw)


def stack_cols(xs: Sequence) -> Tensor:
    """Stack 1-D tensors of equal length into a (n, k) matrix."""
    xs = tuple(as_tensor(x) for x in xs)
    data = np.stack([x.data for x in xs], axis=1)
    return _node(data, "stack_cols", xs, lambda g: tuple(g[:, j] for j in range(len(xs))))


def reduce_sum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.data.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(x.data.sum(axis=axis)), "sum", (x,), bw)


def reduce_mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    return scale(reduce_sum(x, axis), 1.0 / n)


# --- parameters, optimisation, checkpoints ------------------------------------------

class Adam:
    """Adam over a name -> Tensor mapping; gradients are read from ``.grad``."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = p.data - update
            if not np.isfinite(p.data).all():
                raise NonFiniteError(f"parameter '{k}' became non-finite after Adam step")


def save_params(path: str | Path, params: Mapping[str, Tensor], meta: dict | None = None) -> None:
    """Write a JSON checkpoint; float repr round-trips float64 exactly."""
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "params": {
            name: {"shape": list(t.data.shape), "values": t.data.ravel().tolist()}
            for name, t in params.items()
        },
    }
    Path(path).write_text(json.dumps(doc))


def load_params(path: str | Path) -> tuple[dict[str, Tensor], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    params = {}
    for name, entry in doc["params"].items():
        arr = np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return params, doc.get("meta", {})


# --- gradient checking --------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Mapping[str, Tensor] | Iterable[Tensor],
               h: float = 1e-5, tol: float = 1e-4, floor: float = 1e-6) -> dict:
    """Compare reverse-mode gradients against central finite differences.

    ``f`` rebuilds the scalar loss from the current parameter values each call.
    Relative error per element is ``|a - n| / max(|a|, |n|, floor)``; ``floor``
    keeps elements whose true gradient is ~0 from reporting pure FD noise.

    Returns a dict with ``errors`` (name -> max relative error), ``max_error``
    and ``passed``.
    """
    if isinstance(params, Mapping):
        named = dict(params)
    else:
        named = {f"p{i}": p for i, p in enumerate(params)}
    for p in named.values():
        p.grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    errors = {}
    for name, p in named.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        errors[name] = float((np.abs(analytic - numeric) / denom).max()) if p.data.size else 0.0
        p.grad = None
    max_error = max(errors.values()) if errors else 0.0
    return {"errors": errors, "max_error": max_error, "passed": max_error < tol}
