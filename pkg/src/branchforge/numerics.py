"""Small float64 tensor library with reverse-mode autodiff and Adam.

Every op builds a node on a dynamic tape (parent links); ``Tensor.backward``
topologically sorts the tape and accumulates gradients into leaves.
"""

from __future__ import annotations

import contextlib
import os
import tempfile
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

CHECKPOINT_FORMAT_VERSION = 1
_grad_enabled = True


class ShapeMismatch(ValueError):
    pass


class CheckFailed(AssertionError):
    pass


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def backward(self, grad: Optional[np.ndarray] = None):
        if not self.requires_grad:
            return
        order: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            t, done = stack.pop()
            if done:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64)}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t._backward is None:
                t.grad = g if t.grad is None else t.grad + g
                continue
            for p, pg in zip(t._parents, t._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                              _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def matmul(a, b) -> Tensor:
    """Batched matrix product; a 2-D right operand broadcasts over a's batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].data.ndim
    for t in tensors[1:]:
        if t.data.ndim != tensors[0].data.ndim or any(
                t.shape[i] != tensors[0].shape[i] for i in range(t.data.ndim) if i != ax):
            raise ShapeMismatch(f"concat: {tensors[0].shape} vs {t.shape} on axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward)


def slice_(a: Tensor, idx) -> Tensor:
    """Basic or integer-array indexing; gradients scatter-add back."""
    basic = _is_basic(idx)

    def backward(g):
        out = np.zeros_like(a.data)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _result(a.data[idx], (a,), backward)


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def scatter_rows(base: Tensor, rows: Sequence[int], values: Tensor) -> Tensor:
    """Copy of ``base`` (n, d) whose rows ``rows`` are replaced by ``values``."""
    rows = np.asarray(rows, dtype=np.int64)
    if values.shape != (len(rows),) + base.shape[1:]:
        raise ShapeMismatch(f"scatter_rows: {values.shape} into rows {len(rows)} of {base.shape}")
    out = base.data.copy()
    out[rows] = values.data

    def backward(g):
        gb = g.copy()
        gb[rows] = 0.0
        return gb, g[rows]

    return _result(out, (base, values), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (a,), backward)


def attention(q: Tensor, k: Tensor, v: Tensor, bias: Optional[np.ndarray] = None,
              scale: float = 1.0) -> Tensor:
    """softmax(q k^T * scale + bias) v over the last two axes.

    Fused so the backward pass keeps only the attention probabilities.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeMismatch(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    s = (q.data @ np.swapaxes(k.data, -1, -2)) * scale
    if bias is not None:
        s = s + bias
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    del s

    def backward(g):
        dv = np.swapaxes(p, -1, -2) @ g
        dp = g @ np.swapaxes(v.data, -1, -2)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
        return ds @ k.data, np.swapaxes(ds, -1, -2) @ q.data, dv

    return _result(p @ v.data, (q, k, v), backward)


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(a.data > 0, 1.0, slope)
    return _result(a.data * scale, (a,), lambda g: (g * scale,))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def backward(g):
        dxhat = g * gamma.data
        dx = inv / n * (n * dxhat - dxhat.sum(-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        return (dx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape))

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (out,)

    return _result(table.data[ids], (table,), backward)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean token cross-entropy over positions where ``mask`` is nonzero."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeMismatch(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    w = np.ones(targets.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    denom = w.sum()
    if denom == 0:
        raise ValueError("cross_entropy: empty mask")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
    loss = ((lse - picked) * w).sum() / denom

    def backward(g):
        p = np.exp(z - lse[..., None])
        np.put_along_axis(p, targets[..., None],
                          np.take_along_axis(p, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (p * (w / denom * g)[..., None],)

    return _result(loss, (logits,), backward)


# ---------------------------------------------------------------------------
# parameters and optimizer


@dataclass
class ParameterStore:
    params: dict[str, Tensor] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, data) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def norm(self) -> float:
        return float(np.sqrt(sum((t.data ** 2).sum() for t in self.params.values())))


def adam_step(store: ParameterStore, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0):
    """One Adam update with decoupled weight decay; zeroes the gradients."""
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = store.m.get(name)
        if m is None:
            m = store.m[name] = np.zeros_like(p.data)
            store.v[name] = np.zeros_like(p.data)
        v = store.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            update = update + weight_decay * p.data
        p.data = p.data - lr * update
        p.grad = None
    return store


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    worst: list[tuple[str, tuple, float, float, float]]

    def __str__(self) -> str:
        lines = [f"checked {self.checked} coordinates, max relative error {self.max_rel_error:.3e}"]
        for name, idx, a, n, e in self.worst:
            lines.append(f"  {name}{list(idx)}: analytic={a:.6e} numeric={n:.6e} rel={e:.3e}")
        return "\n".join(lines)


def _central(f, p: Tensor, idx, eps: float) -> float:
    orig = p.data[idx]
    p.data[idx] = orig + eps
    up = f().item()
    p.data[idx] = orig - eps
    down = f().item()
    p.data[idx] = orig
    return (up - down) / (2 * eps)


def finite_diff_check(f: Callable[[], Tensor], params: dict[str, Tensor], eps: float = 1e-5,
                      tolerance: float = 1e-4, coords: int = 200, seed: int = 0,
                      floor: float = 1e-6, raise_on_fail: bool = True,
                      retry_eps: Optional[float] = None) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f()`` with central differences.

    The error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``; the floor
    keeps coordinates whose true gradient is zero from dividing by noise.
    Coordinates are a seeded subsample (all of them if fewer than ``coords``).
    With ``retry_eps`` a coordinate over tolerance is re-measured with that
    smaller step, which separates a ReLU kink inside the stencil from a wrong
    gradient; the smaller of the two errors is kept.
    """
    for p in params.values():
        p.grad = None
    out = f()
    if out.data.size != 1:
        raise ValueError("finite_diff_check needs a scalar function")
    out.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    for p in params.values():
        p.grad = None

    universe = [(k, i) for k, p in params.items() for i in range(p.data.size)]
    rng = np.random.default_rng(seed)
    if len(universe) > coords:
        pick = sorted(rng.choice(len(universe), size=coords, replace=False))
        universe = [universe[i] for i in pick]

    errors = []
    with no_grad():
        for k, flat in universe:
            p = params[k]
            idx = np.unravel_index(flat, p.shape)
            a = analytic[k][idx]
            num = _central(f, p, idx, eps)
            err = abs(a - num) / max(abs(a), abs(num), floor)
            if retry_eps is not None and err > tolerance:
                num2 = _central(f, p, idx, retry_eps)
                err2 = abs(a - num2) / max(abs(a), abs(num2), floor)
                if err2 < err:
                    num, err = num2, err2
            errors.append((k, tuple(int(i) for i in idx), float(a), float(num), float(err)))
    errors.sort(key=lambda e: -e[-1])
    report = GradCheckReport(errors[0][-1] if errors else 0.0, len(errors), errors[:5])
    if raise_on_fail and report.max_rel_error > tolerance:
        raise CheckFailed(str(report))
    return report


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(store: ParameterStore, path, extra: Optional[dict] = None):
    """Write parameters as hex-float text; atomic rename."""
    lines = [f"format_version: {CHECKPOINT_FORMAT_VERSION}"]
    for key, value in sorted((extra or {}).items()):
        lines.append(f"meta {key} {value}")
    for name, t in store.params.items():
        shape = ",".join(map(str, t.shape))
        payload = " ".join(float(v).hex() for v in t.data.ravel())
        lines.append(f"param {name} {shape} {payload}")
    atomic_write(path, "\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[ParameterStore, dict]:
    store = ParameterStore()
    meta = {}
    with open(path) as fh:
        first = fh.readline().strip()
        if first != f"format_version: {CHECKPOINT_FORMAT_VERSION}":
            raise ValueError(f"unsupported checkpoint header {first!r}")
        for line in fh:
            kind, rest = line.rstrip("\n").split(" ", 1)
            if kind == "meta":
                key, value = rest.split(" ", 1)
                meta[key] = value
                continue
            name, shape, *payload = rest.split(" ")
            dims = tuple(int(s) for s in shape.split(",") if s)
            data = np.array([float.fromhex(v) for v in payload if v], dtype=np.float64)
            store.add(name, data.reshape(dims))
    return store, meta


def atomic_write(path, text: str):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def parameters(store: ParameterStore, prefix: str = "") -> dict[str, Tensor]:
    return {k: v for k, v in store.params.items() if k.startswith(prefix)}


def init_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def flatten_grads(tensors: Iterable[Tensor]) -> np.ndarray:
    return np.concatenate([(t.grad if t.grad is not None else np.zeros_like(t.data)).ravel() for t in tensors])
