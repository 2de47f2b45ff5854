"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operator set the imputation network needs is provided. Every
operation appends a node to the :class:`Graph` of its inputs; the tape order is
a valid topological order, so :meth:`Graph.backward` is a single reverse sweep.

Typical use::

    g = Graph()
    w = g.leaf(np.ones((3, 2)), name="w")
    x = g.constant(np.arange(6.0).reshape(2, 3))
    loss = sum_(matmul(x, w))
    grads = g.backward(loss)
    grads.of(w)
"""
from __future__ import annotations

import hashlib
import json
import math
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np
from scipy.special import ndtr

DTYPE = np.float64
LN_EPS = 1e-5
NORM_EPS = 1e-12
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """Invalid configuration value."""


class ContractError(RuntimeError):
    """A documented pre-condition was violated."""


class DegenerateInputError(ValueError):
    """Input is too small for the operation to be defined."""


class Tensor:
    """Immutable value recorded on a :class:`Graph`."""

    __slots__ = ("value", "graph", "index", "requires_grad", "name")

    def __init__(self, value: np.ndarray, graph: "Graph", index: int | None,
                 requires_grad: bool, name: str | None = None):
        value = np.asarray(value)
        value.flags.writeable = False
        self.value = value
        self.graph = graph
        self.index = index
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return np.array(self.value)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("parents", "backward")

    def __init__(self, parents: tuple[int, ...], backward: Callable | None):
        self.parents = parents
        self.backward = backward


class Gradients:
    """Gradient slots produced by :meth:`Graph.backward`."""

    def __init__(self, slots: list[np.ndarray | None]):
        self._slots = slots

    def of(self, t: Tensor) -> np.ndarray:
        if t.index is None:
            return np.zeros_like(t.value)
        g = self._slots[t.index]
        return np.zeros_like(t.value) if g is None else g

    def populated(self, t: Tensor) -> bool:
        return t.index is not None and self._slots[t.index] is not None


class Graph:
    """Append-only tape. Single-threaded; use one graph per worker."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value, name: str | None = None) -> Tensor:
        arr = np.array(value, dtype=DTYPE)
        self.nodes.append(_Node((), None))
        return Tensor(arr, self, len(self.nodes) - 1, True, name)

    def constant(self, value) -> Tensor:
        arr = np.array(value, dtype=DTYPE)
        return Tensor(arr, self, None, False)

    def record(self, value: np.ndarray, parents: Sequence[Tensor],
               backward: Callable[[np.ndarray], tuple]) -> Tensor:
        """Append an op node; constant-folds when no parent needs a gradient."""
        if value.dtype != DTYPE:
            value = value.astype(DTYPE)
        if not any(p.requires_grad for p in parents):
            return Tensor(value, self, None, False)
        idx = tuple(p.index if p.requires_grad else -1 for p in parents)
        self.nodes.append(_Node(idx, backward))
        return Tensor(value, self, len(self.nodes) - 1, True)

    def backward(self, loss: Tensor) -> Gradients:
        if loss.graph is not self:
            raise ContractError("loss tensor belongs to a different graph")
        if loss.value.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        slots: list[np.ndarray | None] = [None] * len(self.nodes)
        if loss.index is None:
            return Gradients(slots)
        slots[loss.index] = np.ones_like(loss.value)
        for i in range(loss.index, -1, -1):
            g = slots[i]
            node = self.nodes[i]
            if g is None or node.backward is None:
                continue
            for p, gp in zip(node.parents, node.backward(g)):
                if p < 0 or gp is None:
                    continue
                slots[p] = gp if slots[p] is None else slots[p] + gp
        return Gradients(slots)


# ---------------------------------------------------------------- helpers

def _graph_of(*xs) -> Graph:
    for x in xs:
        if isinstance(x, Tensor):
            return x.graph
    raise ContractError("at least one operand must be a Tensor")


def _lift(x, graph: Graph) -> Tensor:
    if isinstance(x, Tensor):
        if x.graph is not graph:
            raise ContractError("operands belong to different graphs")
        return x
    return graph.constant(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    gr = _graph_of(a, b)
    a, b = _lift(a, gr), _lift(b, gr)
    sa, sb = a.shape, b.shape
    return gr.record(a.value + b.value, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    gr = _graph_of(a, b)
    a, b = _lift(a, gr), _lift(b, gr)
    sa, sb = a.shape, b.shape
    return gr.record(a.value - b.value, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    gr = _graph_of(a, b)
    a, b = _lift(a, gr), _lift(b, gr)
    av, bv = a.value, b.value
    ra, rb = a.requires_grad, b.requires_grad

    def back(g):
        return (_unbroadcast(g * bv, av.shape) if ra else None,
                _unbroadcast(g * av, bv.shape) if rb else None)

    return gr.record(av * bv, (a, b), back)


def div(a, b) -> Tensor:
    gr = _graph_of(a, b)
    a, b = _lift(a, gr), _lift(b, gr)
    av, bv = a.value, b.value
    out = av / bv
    return gr.record(out, (a, b),
                     lambda g: (_unbroadcast(g / bv, av.shape),
                                _unbroadcast(-g * out / bv, bv.shape)))


def neg(a: Tensor) -> Tensor:
    return a.graph.record(-a.value, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    return a.graph.record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    av = a.value
    return a.graph.record(np.log(av), (a,), lambda g: (g / av,))


def square(a: Tensor) -> Tensor:
    av = a.value
    return a.graph.record(av * av, (a,), lambda g: (2.0 * g * av,))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.value)
    return a.graph.record(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    av = a.value
    return a.graph.record(np.logaddexp(0.0, av), (a,), lambda g: (g * _sigmoid(av),))


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    av = a.value
    cdf = ndtr(av)
    pdf = np.exp(-0.5 * av * av) * _INV_SQRT_2PI
    return a.graph.record(av * cdf, (a,), lambda g: (g * (cdf + av * pdf),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    av = a.value
    inside = (av > lo) & (av < hi)
    return a.graph.record(np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


def stop_gradient(a: Tensor) -> Tensor:
    """Identity forward; contributes nothing to the backward pass."""
    return Tensor(np.array(a.value), a.graph, None, False)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=DTYPE)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------- reductions / shape

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return a.graph.record(np.asarray(out, dtype=DTYPE), (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.value.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return a.graph.record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return a.graph.record(np.swapaxes(a.value, ax1, ax2), (a,),
                          lambda g: (np.swapaxes(g, ax1, ax2),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    gr = _graph_of(*xs)
    xs = [_lift(x, gr) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return gr.record(np.concatenate([x.value for x in xs], axis=axis), xs,
                     lambda g: tuple(np.split(g, cuts, axis=axis)))


def take(a: Tensor, index: int, axis: int) -> Tensor:
    """Select one position along ``axis`` (the axis is dropped)."""
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=DTYPE)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return a.graph.record(np.take(a.value, index, axis=axis), (a,), back)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return a.graph.record(np.broadcast_to(a.value, shape).copy(), (a,),
                          lambda g: (_unbroadcast(g, old),))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes; leading axes broadcast."""
    gr = _graph_of(a, b)
    a, b = _lift(a, gr), _lift(b, gr)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    ra, rb = a.requires_grad, b.requires_grad

    def back(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape) if ra else None
        if not rb:
            return ga, None
        if av.ndim > 2 and bv.ndim == 2:
            # shared weight: fold the batch axes into one GEMM
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape)
        return ga, gb

    return gr.record(np.matmul(av, bv), (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else add(out, b)


# ---------------------------------------------------------------- normalisation

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    av = a.value
    e = np.exp(av - av.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return a.graph.record(out, (a,),
                          lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def layernorm(x: Tensor, gain, bias, eps: float = LN_EPS) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then ``gain*x + bias``."""
    d = x.shape[-1]
    if d < 2:
        raise DegenerateInputError(f"layernorm needs feature size >= 2, got {d}")
    gr = x.graph
    gain, bias = _lift(gain, gr), _lift(bias, gr)
    xv, gv = x.value, gain.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def back(g):
        dxhat = g * gv
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, gv.shape), _unbroadcast(g, bias.shape)

    return gr.record(xhat * gv + bias.value, (x, gain, bias), back)


def l2_normalize(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Divide each row by ``max(||row||, eps)``."""
    xv = x.value
    norm = np.sqrt((xv * xv).sum(axis=-1, keepdims=True))
    big = norm >= eps
    den = np.where(big, norm, eps)
    out = xv / den

    def back(g):
        proj = (g * out).sum(axis=-1, keepdims=True)
        return (np.where(big, (g - out * proj) / den, g / den),)

    return x.graph.record(out, (x,), back)


def l2_normalize_array(x: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    return x / np.maximum(norm, eps)


# ---------------------------------------------------------------- attention

ATTN_KEYS = ("Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo")


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         weights: Mapping[str, Tensor], return_weights: bool = False):
    """Scaled dot-product attention over ``[..., L, d]`` inputs.

    ``weights`` maps the names in :data:`ATTN_KEYS` to tensors; projections are
    ``d x d`` matrices applied on the right.
    """
    d = q.shape[-1]
    if heads < 1 or d % heads:
        raise ConfigError(f"model width {d} is not divisible by heads={heads}")
    if k.shape[-1] != d or v.shape[-1] != d or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    dh = d // heads

    def split(t: Tensor) -> Tensor:
        return swapaxes(reshape(t, t.shape[:-1] + (heads, dh)), -3, -2)

    qh = split(linear(q, weights["Wq"], weights["bq"]))
    kh = split(linear(k, weights["Wk"], weights["bk"]))
    vh = split(linear(v, weights["Wv"], weights["bv"]))
    scores = mul(matmul(qh, swapaxes(kh, -1, -2)), 1.0 / math.sqrt(dh))
    attn = softmax(scores, axis=-1)
    ctx = swapaxes(matmul(attn, vh), -3, -2)
    ctx = reshape(ctx, ctx.shape[:-2] + (d,))
    out = linear(ctx, weights["Wo"], weights["bo"])
    return (out, attn) if return_weights else out


# ---------------------------------------------------------------- verification

def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray],
              step: float = 1e-5) -> float:
    """Relative error between analytic and central-difference gradients.

    ``fn`` receives one leaf tensor per input array and must return a scalar.
    Returns ``max_i ||analytic_i - numeric_i|| / max(||analytic_i||, ||numeric_i||, floor)``
    where ``floor`` is 1e-6 times the largest gradient norm, so inputs with an
    identically zero gradient are judged against the scale of the others.
    """
    arrays = [np.array(a, dtype=DTYPE) for a in inputs]
    g = Graph()
    leaves = [g.leaf(a) for a in arrays]
    grads = g.backward(fn(*leaves))
    pairs = []
    for i, base in enumerate(arrays):
        analytic = grads.of(leaves[i])
        numeric = np.zeros_like(base)
        for j in range(base.size):
            vals = []
            for sign in (1.0, -1.0):
                pert = [a.copy() for a in arrays]
                pert[i].flat[j] += sign * step
                gg = Graph()
                vals.append(float(fn(*[gg.leaf(a) for a in pert]).value))
            numeric.flat[j] = (vals[0] - vals[1]) / (2.0 * step)
        pairs.append((analytic, numeric))
    top = max(max(np.linalg.norm(a), np.linalg.norm(n)) for a, n in pairs)
    floor = 1e-6 * max(top, 1.0)
    return max(float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))
               for a, n in pairs)


# ---------------------------------------------------------------- parameters

class ParamSet:
    """Ordered name -> float64 array mapping; the federated unit of exchange."""

    def __init__(self, items: Iterable[tuple[str, np.ndarray]] | Mapping | None = None):
        self._data: OrderedDict[str, np.ndarray] = OrderedDict()
        if items is not None:
            pairs = items.items() if isinstance(items, Mapping) else items
            for name, arr in pairs:
                self._data[name] = np.array(arr, dtype=DTYPE)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __setitem__(self, name: str, value) -> None:
        self._data[name] = np.array(value, dtype=DTYPE)

    def __contains__(self, name: object) -> bool:
        return name in self._data

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def keys(self):
        return self._data.keys()

    def items(self):
        return self._data.items()

    def values(self):
        return self._data.values()

    def copy(self) -> "ParamSet":
        return ParamSet((k, v.copy()) for k, v in self._data.items())

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._data.items()}

    def num_params(self) -> int:
        return int(sum(v.size for v in self._data.values()))

    def bitwise_equal(self, other: "ParamSet") -> bool:
        if list(self.keys()) != list(other.keys()):
            return False
        return all(self[k].shape == other[k].shape and self[k].tobytes() == other[k].tobytes()
                   for k in self.keys())

    def to_bytes(self) -> tuple[dict, bytes]:
        entries, chunks, offset = [], [], 0
        for name, arr in self._data.items():
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            chunks.append(raw)
            offset += len(raw)
        manifest = {"format": "paramset", "dtype": "float64-le", "total_bytes": offset,
                    "tensors": entries}
        return manifest, b"".join(chunks)

    @classmethod
    def from_bytes(cls, manifest: Mapping, blob: bytes) -> "ParamSet":
        if manifest.get("dtype") != "float64-le":
            raise ContractError(f"unsupported dtype {manifest.get('dtype')!r}")
        ps = cls()
        for entry in manifest["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=entry["offset"])
            ps[entry["name"]] = arr.reshape(shape)
        return ps

    def save(self, path: str | Path) -> tuple[Path, Path]:
        """Write ``<path>.json`` (manifest) and ``<path>.bin`` (flat data)."""
        path = Path(path)
        manifest, blob = self.to_bytes()
        jpath, bpath = path.with_suffix(".json"), path.with_suffix(".bin")
        manifest["data_file"] = bpath.name
        jpath.write_text(json.dumps(manifest, indent=1))
        bpath.write_bytes(blob)
        return jpath, bpath

    @classmethod
    def load(cls, path: str | Path) -> "ParamSet":
        path = Path(path)
        jpath = path.with_suffix(".json")
        manifest = json.loads(jpath.read_text())
        blob = (jpath.parent / manifest.get("data_file", path.with_suffix(".bin").name)).read_bytes()
        return cls.from_bytes(manifest, blob)

    def digest(self) -> str:
        manifest, blob = self.to_bytes()
        h = hashlib.sha256(json.dumps(manifest, sort_keys=True).encode())
        h.update(blob)
        return h.hexdigest()

    def bind(self, graph: Graph, trainable: bool = True,
             only: Callable[[str], bool] | None = None) -> dict[str, Tensor]:
        """Place every array on ``graph`` as a leaf (or constant)."""
        out = {}
        for name, arr in self._data.items():
            grad = trainable and (only is None or only(name))
            out[name] = graph.leaf(arr, name=name) if grad else graph.constant(arr)
        return out


class Adam:
    """Adam with bias correction, operating in place on a :class:`ParamSet`.

    Moments live in one flat buffer; the set of parameter names passed to
    :meth:`step` must stay the same between calls.
    """

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.names: tuple[str, ...] | None = None
        self.m = self.v = None
        self.t = 0

    def step(self, params: ParamSet, grads: Mapping[str, np.ndarray]) -> None:
        names = tuple(grads)
        if self.names is None:
            self.names = names
        elif names != self.names:
            raise ContractError("Adam.step called with a different parameter set")
        g = np.concatenate([np.ravel(grads[n]) for n in names])
        if self.m is None:
            self.m, self.v = np.zeros_like(g), np.zeros_like(g)
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        m, v = self.m, self.v
        m *= self.beta1
        m += (1.0 - self.beta1) * g
        v *= self.beta2
        v += (1.0 - self.beta2) * (g * g)
        upd = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        pos = 0
        for n in names:
            old = params[n]
            params[n] = old - upd[pos:pos + old.size].reshape(old.shape)
            pos += old.size
