"""A small tape-based reverse-mode autodiff on numpy arrays.

Only what the toy models need: elementwise math, matmul, gathers and
segment reductions over graph edges, layer norm, softmax, losses and AdamW.

Operations are recorded only while a :class:`Tape` is active, so forward
passes outside a tape run as plain numpy code.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DisconnectedGraph, ShapeMismatch, UnknownParam

CHECKPOINT_FORMAT = "locaframe-params"
CHECKPOINT_VERSION = 1

_active_tapes: list["Tape"] = []


class Tape:
    """Records operations in execution order, which is a topological order."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self):
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes.remove(self)

    def record(self, out: "Tensor", parents: tuple["Tensor", ...], backward: Callable):
        self.nodes.append((out, parents, backward))


def _current_tape() -> Tape | None:
    return _active_tapes[-1] if _active_tapes else None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    __add__ = lambda self, o: add(self, o)  # noqa: E731
    __radd__ = lambda self, o: add(o, self)  # noqa: E731
    __sub__ = lambda self, o: sub(self, o)  # noqa: E731
    __rsub__ = lambda self, o: sub(o, self)  # noqa: E731
    __mul__ = lambda self, o: mul(self, o)  # noqa: E731
    __rmul__ = lambda self, o: mul(o, self)  # noqa: E731
    __truediv__ = lambda self, o: div(self, o)  # noqa: E731
    __rtruediv__ = lambda self, o: div(o, self)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731
    __matmul__ = lambda self, o: matmul(self, o)  # noqa: E731
    __pow__ = lambda self, p: power(self, p)  # noqa: E731

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    x = np.asarray(x)
    # floating inputs keep their precision so float32 models stay float32
    return Tensor(x if np.issubdtype(x.dtype, np.floating) else x.astype(np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result, recording it when a tape is active and a parent needs grad."""
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    tape = _current_tape()
    if needs and tape is not None:
        tape.record(out, tuple(parents), backward)
    return out


def _lift(a, like: Tensor | None = None) -> Tensor:
    if isinstance(a, Tensor):
        return a
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(a, dtype=dtype))


# --- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    return _make(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,))


def sin(a: Tensor) -> Tensor:
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def silu(a: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))  # logistic without exp overflow
    return _make(a.data * s, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),))


def abs_(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


# --- shapes ----------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def getitem(a: Tensor, idx) -> Tensor:
    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), backward)


def segment_sum_np(x: np.ndarray, ids: np.ndarray, n: int) -> np.ndarray:
    """Sum rows of ``x`` into ``n`` segments; sequential order, deterministic."""
    out = np.zeros((n,) + x.shape[1:], dtype=x.dtype)
    if x.shape[0] == 0:
        return out
    if np.all(ids[1:] >= ids[:-1]):
        counts = np.bincount(ids, minlength=n)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        present = counts > 0
        out[present] = np.add.reduceat(x, starts[present], axis=0)
    else:
        np.add.at(out, ids, x)
    return out


def gather(a: Tensor, index: np.ndarray) -> Tensor:
    """Rows ``a[index]``; the adjoint is a segment sum."""
    n = a.shape[0]
    return _make(a.data[index], (a,), lambda g: (segment_sum_np(g, index, n),))


def segment_sum(a: Tensor, ids: np.ndarray, n: int) -> Tensor:
    return _make(segment_sum_np(a.data, ids, n), (a,), lambda g: (g[ids],))


def segment_softmax(logits: Tensor, ids: np.ndarray, n: int) -> Tensor:
    """Softmax over the rows sharing a segment id (e.g. edges into one node)."""
    shift = np.full((n,) + logits.shape[1:], -np.inf, dtype=logits.dtype)
    np.maximum.at(shift, ids, logits.data)
    z = exp(logits - shift[ids])
    return z / gather(segment_sum(z, ids, n), ids)


def softmax(x: Tensor, segment_ids: np.ndarray | None = None, num_segments: int | None = None) -> Tensor:
    if segment_ids is None:
        z = exp(x - x.data.max(axis=-1, keepdims=True))
        return z / tsum(z, axis=-1, keepdims=True)
    n = int(num_segments if num_segments is not None else segment_ids.max() + 1)
    return segment_softmax(x, segment_ids, n)


def linear_map(x: Tensor, action: Callable[[np.ndarray], np.ndarray], adjoint: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    """A fixed linear operator with a known adjoint, e.g. a frame transport."""
    return _make(action(x.data), (x,), lambda g: (adjoint(g),))


def where_const(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    return _make(np.where(mask, a.data, b.data), (a, b), lambda g: (np.where(mask, g, 0.0), np.where(mask, 0.0, g)))


# --- parameters ------------------------------------------------------------


@dataclass
class _Entry:
    tensor: Tensor
    learnable: bool
    state: dict[str, np.ndarray] = field(default_factory=dict)


class ParamStore:
    """Named dense arrays with gradients and optimizer side-slots."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._entries: dict[str, _Entry] = {}
        self.step_count = 0

    def add(self, name: str, values: np.ndarray, learnable: bool = True) -> Tensor:
        values = np.array(values, dtype=self.dtype)
        t = Tensor(values, requires_grad=learnable, name=name)
        t.grad = np.zeros_like(values)
        self._entries[name] = _Entry(t, learnable)
        return t

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._entries[name].tensor
        except KeyError:
            raise UnknownParam(name) from None

    def names(self) -> list[str]:
        return list(self._entries)

    def learnable(self) -> list[str]:
        return [k for k, e in self._entries.items() if e.learnable]

    def values(self, name: str) -> np.ndarray:
        return self[name].data

    def grads(self, name: str) -> np.ndarray:
        return self[name].grad

    def is_learnable(self, name: str) -> bool:
        return self._entries[name].learnable

    def state(self, name: str) -> dict[str, np.ndarray]:
        return self._entries[name].state

    def zero_grad(self):
        for e in self._entries.values():
            e.tensor.grad = np.zeros_like(e.tensor.data)

    def num_values(self) -> int:
        return sum(e.tensor.data.size for e in self._entries.values())

    # checkpoint: {"format", "version", "step", "params": {name: {shape, learnable, values}}}
    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "dtype": self.dtype.name,
            "step": self.step_count,
            "params": {
                k: {
                    "shape": list(e.tensor.data.shape),
                    "learnable": e.learnable,
                    "values": e.tensor.data.astype(np.float64).ravel().tolist(),
                }
                for k, e in self._entries.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParamStore":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a parameter checkpoint")
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')}")
        store = cls(d.get("dtype", "float64"))
        store.step_count = d.get("step", 0)
        for k, e in d["params"].items():
            store.add(k, np.array(e["values"], dtype=np.float64).reshape(e["shape"]), e["learnable"])
        return store

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "ParamStore":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# --- backward --------------------------------------------------------------


def backward(tape: Tape, loss: Tensor, params: ParamStore | None = None, warn_disconnected: bool = True):
    """Accumulate d(loss)/d(leaf) into the ``grad`` of every reachable leaf.

    Parameters of ``params`` are leaves, so their grads land in the store.
    Each recorded op is visited once, in reverse recording order.
    """
    if loss.data.size != 1:
        raise ShapeMismatch("backward needs a scalar loss")
    pending: dict[int, tuple[Tensor, np.ndarray]] = {id(loss): (loss, np.ones_like(loss.data))}
    for out, parents, fn in reversed(tape.nodes):
        entry = pending.pop(id(out), None)
        if entry is None:
            continue
        for p, pg in zip(parents, fn(entry[1])):
            if not p.requires_grad or pg is None:
                continue
            prev = pending.get(id(p))
            pending[id(p)] = (p, pg if prev is None else prev[1] + pg)
    # whatever is left was never produced by a recorded op: leaves
    reached: set[int] = set()
    for key, (leaf, g) in pending.items():
        leaf.grad = g if leaf.grad is None else leaf.grad + g
        reached.add(key)
    if params is not None:
        missing = [k for k in params.learnable() if id(params[k]) not in reached]
        if missing and warn_disconnected:
            warnings.warn(f"parameters never reached the loss: {missing}", DisconnectedGraph, stacklevel=2)


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float]
    passed: bool


def grad_check(
    f: Callable[[], Tensor],
    params: ParamStore,
    tol: float = 1e-6,
    step: float = 1e-5,
    names: Sequence[str] | None = None,
    max_entries: int | None = 12,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients against central finite differences.

    ``f`` must rebuild the loss from the current parameter values. The error
    for a parameter is ``max|analytic - numeric| / max(max|numeric|, max|analytic|)``
    over the probed entries; ``max_entries`` caps how many entries per array
    are probed (chosen at random).
    """
    rng = np.random.default_rng(seed)
    names = list(names) if names is not None else params.learnable()
    params.zero_grad()
    with Tape() as tape:
        loss = f()
    backward(tape, loss, params, warn_disconnected=False)
    noise = 64 * np.finfo(np.float64).eps * max(1.0, abs(float(loss.data))) / step
    analytic = {k: params.grads(k).copy() for k in names}
    per = {}
    for k in names:
        vals = params.values(k)
        flat = vals.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        num = np.empty(len(idx))
        for t, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            up = float(f().data)
            flat[i] = orig - step
            down = float(f().data)
            flat[i] = orig
            num[t] = (up - down) / (2 * step)
        ana = analytic[k].reshape(-1)[idx]
        scale = max(np.max(np.abs(num)), np.max(np.abs(ana)), 1e-300)
        per[k] = float(max(np.max(np.abs(ana - num)) - noise, 0.0) / scale)
    worst = max(per.values(), default=0.0)
    return GradCheckReport(worst, per, worst < tol)


# --- layers ----------------------------------------------------------------


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_linear(params: ParamStore, name: str, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True, zero: bool = False):
    w = np.zeros((n_in, n_out)) if zero else glorot(rng, n_in, n_out)
    params.add(f"{name}.weight", w)
    if bias:
        params.add(f"{name}.bias", np.zeros(n_out))


def linear(params: ParamStore, name: str, x: Tensor) -> Tensor:
    w = params[f"{name}.weight"]
    if x.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"{name}: input width {x.shape[-1]} != {w.shape[0]}")
    y = matmul(x, w)
    if f"{name}.bias" in params:
        y = y + params[f"{name}.bias"]
    return y


def init_mlp(params: ParamStore, name: str, sizes: Sequence[int], rng: np.random.Generator, zero_last: bool = False):
    """Register weights for an MLP with layer widths ``sizes`` (input first)."""
    n = len(sizes) - 1
    for k in range(n):
        init_linear(params, f"{name}.{k}", sizes[k], sizes[k + 1], rng, zero=zero_last and k == n - 1)


def mlp(params: ParamStore, name: str, x: Tensor, hidden_spec: Sequence[int] | None = None) -> Tensor:
    """Linear layers with SiLU between them; depth is read from the registered params.

    ``hidden_spec`` is optional and only checked against the registered widths.
    """
    k = 0
    while f"{name}.{k}.weight" in params:
        k += 1
    if k == 0:
        raise UnknownParam(f"{name}.0.weight")
    if hidden_spec is not None:
        widths = [params[f"{name}.{i}.weight"].shape[1] for i in range(k - 1)]
        if list(hidden_spec) != widths:
            raise ShapeMismatch(f"{name}: hidden widths {widths} != {list(hidden_spec)}")
    for i in range(k):
        x = linear(params, f"{name}.{i}", x)
        if i < k - 1:
            x = silu(x)
    return x


def init_layernorm(params: ParamStore, name: str, dim: int):
    params.add(f"{name}.scale", np.ones(dim))
    params.add(f"{name}.shift", np.zeros(dim))


def layernorm(params: ParamStore | None, name: str | None, x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean and unit variance, then scale and shift."""
    mu = mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = mean(centered * centered, axis=-1, keepdims=True)
    y = centered / sqrt(var + eps)
    if params is None:
        return y
    return y * params[f"{name}.scale"] + params[f"{name}.shift"]


# --- losses ----------------------------------------------------------------


def smooth_l1(pred: Tensor, target, beta: float = 1.0) -> Tensor:
    target = _lift(target, pred)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {target.shape}")
    d = pred - target
    ad = np.abs(d.data)
    quad = ad < beta
    val = np.where(quad, 0.5 * ad**2 / beta, ad - 0.5 * beta)
    grad = np.where(quad, d.data / beta, np.sign(d.data)) / d.data.size
    out = _make(np.asarray(val.mean()), (d,), lambda g: (g * grad,))
    return out


def mse(pred: Tensor, target) -> Tensor:
    target = _lift(target, pred)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {target.shape}")
    d = pred - target
    return mean(d * d)


# --- optimizer -------------------------------------------------------------


def adamw_step(
    params: ParamStore,
    lr: float = 5e-4,
    weight_decay: float = 5e-3,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
):
    """Decoupled-weight-decay Adam; moments live in each entry's side-slots."""
    params.step_count += 1
    t = params.step_count
    b1, b2 = betas
    for k in params.learnable():
        p = params[k]
        st = params.state(k)
        if "m" not in st:
            st["m"] = np.zeros_like(p.data)
            st["v"] = np.zeros_like(p.data)
        g = p.grad
        st["m"] = b1 * st["m"] + (1 - b1) * g
        st["v"] = b2 * st["v"] + (1 - b2) * g * g
        mhat = st["m"] / (1 - b1**t)
        vhat = st["v"] / (1 - b2**t)
        if weight_decay:
            p.data *= 1 - lr * weight_decay
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)


def clip_grad_norm(params: ParamStore, max_norm: float) -> float:
    """Scale all grads so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(params.grads(k) ** 2)) for k in params.learnable()))
    if max_norm > 0 and total > max_norm:
        s = max_norm / (total + 1e-12)
        for k in params.learnable():
            params[k].grad = params.grads(k) * s
    return total
