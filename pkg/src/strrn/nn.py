"""Minimal reverse-mode autodiff on float64 numpy arrays.

Only the handful of ops the tracker needs: dense, relu, conv2d, max-pool,
gathers/reshapes for the geometry path, and a summed squared-error loss.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

CKPT_FORMAT = "strrn-ckpt-v1"


class ShapeError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class Tensor:
    """An array plus the closure that routes its gradient to its parents."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, parents: tuple = (), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.value) if requires_grad and not parents else None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(value, requires_grad=True, parents=parents, backward=backward)
    return Tensor(value)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every leaf that requires a gradient."""
    if not isinstance(loss, Tensor):
        raise UsageError("backward needs a Tensor produced by a recorded forward pass")
    if loss.value.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("no recorded forward pass reaches any trainable parameter")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
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

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def relu(x) -> Tensor:
    x = as_tensor(x)
    # subgradient at exactly 0 is 0
    mask = x.value > 0
    return _node(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def log_abs_clamped(x, eps: float) -> Tensor:
    """log(max(|x|, eps)); zero gradient inside the clamp."""
    x = as_tensor(x)
    mag = np.abs(x.value)
    live = mag > eps
    out = np.log(np.where(live, mag, eps))
    safe = np.where(live, x.value, 1.0)
    return _node(out, (x,), lambda g: (np.where(live, g / safe, 0.0),))


# ---------------------------------------------------------------- structural


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return _node(x.value.reshape(shape), (x,), lambda g: (g.reshape(src),))


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([p.value for p in parts], axis=axis), parts, bw)


def take(x, index: np.ndarray, axis: int) -> Tensor:
    """Gather along one axis; repeated indices accumulate on the way back."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    axis = axis % x.value.ndim

    def bw(g):
        out = np.zeros_like(x.value)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (out,)

    return _node(np.take(x.value, index, axis=axis), (x,), bw)


def segment_sum(x, segments: np.ndarray, n_segments: int, axis: int) -> Tensor:
    """Sum slices of ``x`` along ``axis`` into ``n_segments`` buckets."""
    x = as_tensor(x)
    segments = np.asarray(segments, dtype=np.intp)
    axis = axis % x.value.ndim
    shape = list(x.shape)
    shape[axis] = n_segments
    out = np.zeros(shape)
    np.add.at(np.moveaxis(out, axis, 0), segments, np.moveaxis(x.value, axis, 0))
    return _node(out, (x,), lambda g: (np.take(g, segments, axis=axis),))


def total(x) -> Tensor:
    x = as_tensor(x)
    return _node(x.value.sum(), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


# ---------------------------------------------------------------- layers


def dense(x, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W.T + b`` over the last axis of ``x``."""
    x = as_tensor(x)
    if x.value.ndim == 0 or x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeError(f"dense: input {x.shape} incompatible with W {W.shape} / b {b.shape}")
    out = x.value @ W.value.T + b.value

    def bw(g):
        gx = g @ W.value
        g2 = g.reshape(-1, g.shape[-1])
        gW = g2.T @ x.value.reshape(-1, x.shape[-1])
        gb = g2.sum(axis=0)
        return gx, gW, gb

    return _node(out, (x, W, b), bw)


def _windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (..., H, W, C) -> (..., Ho, Wo, C, k, k)
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(-3, -2))
    return win[..., ::stride, ::stride, :, :, :]


def conv2d(x, K: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """Valid-padding cross-correlation. x: (..., H, W, C); K: (k, k, C, F)."""
    x = as_tensor(x)
    k, k2, cin, cout = K.shape
    if x.value.ndim < 3 or x.shape[-1] != cin:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {K.shape}")
    H, W = x.shape[-3], x.shape[-2]
    if k != k2 or k > H or k > W:
        raise ShapeError(f"conv2d: kernel {K.shape} larger than input {x.shape}")
    win = _windows(x.value, k, stride)
    ho, wo = win.shape[-5], win.shape[-4]
    out = np.einsum("...hwcij,ijcf->...hwf", win, K.value) + b.value

    def bw(g):
        gK = np.einsum("...hwcij,...hwf->ijcf", win, g)
        gb = g.reshape(-1, cout).sum(axis=0)
        gx = np.zeros_like(x.value)
        for i in range(k):
            for j in range(k):
                gx[..., i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += \
                    np.einsum("...hwf,cf->...hwc", g, K.value[i, j])
        return gx, gK, gb

    return _node(out, (x, K, b), bw)


def maxpool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping max-pool over (H, W) of a (..., H, W, C) map.

    Trailing rows/cols that do not fill a window are dropped. Ties go to the
    first window element in row-major order.
    """
    x = as_tensor(x)
    H, W, C = x.shape[-3:]
    ho, wo = H // size, W // size
    if ho == 0 or wo == 0:
        raise ShapeError(f"maxpool2d: window {size} larger than input {x.shape}")
    lead = x.shape[:-3]
    crop = x.value[..., :ho * size, :wo * size, :]
    blocks = crop.reshape(*lead, ho, size, wo, size, C)
    nl = len(lead)
    perm = list(range(nl)) + [nl, nl + 2, nl + 4, nl + 1, nl + 3]
    flat = blocks.transpose(perm).reshape(*lead, ho, wo, C, size * size)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gblocks = gflat.reshape(*lead, ho, wo, C, size, size)
        inv = list(range(nl)) + [nl, nl + 3, nl + 1, nl + 4, nl + 2]
        gx = np.zeros_like(x.value)
        gx[..., :ho * size, :wo * size, :] = gblocks.transpose(inv).reshape(crop.shape)
        return (gx,)

    return _node(out, (x,), bw)


def mse_loss(pred, target) -> Tensor:
    """Sum of squared differences (squared L2 norm, not a mean)."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shapes {pred.shape} and {target.shape} differ")
    diff = pred.value - target.value
    return _node(np.sum(diff * diff), (pred, target), lambda g: (2.0 * g * diff, -2.0 * g * diff))


# ---------------------------------------------------------------- parameters


class ParamStore:
    """Ordered name -> trainable leaf Tensor mapping."""

    def __init__(self):
        self._entries: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, value) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad[...] = 0.0

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for name, t in self._entries.items():
            other.add(name, t.value.copy())
        return other

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        missing = [n for n in self._entries if n not in values]
        extra = [n for n in values if n not in self._entries]
        if missing or extra:
            raise CheckpointError(f"parameter names differ: missing={missing} unexpected={extra}")
        for name, t in self._entries.items():
            v = np.asarray(values[name], dtype=np.float64)
            if v.shape != t.shape:
                raise CheckpointError(f"{name}: checkpoint shape {v.shape} != model shape {t.shape}")
        for name, t in self._entries.items():
            t.value[...] = values[name]


def glorot_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int, fan_out: int) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=tuple(shape))


def backward_and_step(loss: Tensor, store: ParamStore, lr: float = 1e-2) -> ParamStore:
    """Backprop ``loss``, apply one SGD step to every entry and zero the gradients."""
    backward(loss)
    for t in store._entries.values():
        t.value -= lr * t.grad
        t.grad[...] = 0.0
    return store


def grad_check(loss_fn: Callable[[], Tensor], store: ParamStore, eps: float = 1e-5,
               names: Iterable[str] | None = None, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max over checked entries of |analytic - central FD| / max(1, |analytic|).

    ``max_entries`` caps the entries probed per parameter (sampled with ``rng``).
    """
    names = list(store) if names is None else list(names)
    store.zero_grad()
    backward(loss_fn())
    analytic = {n: store[n].grad.copy() for n in names}
    store.zero_grad()
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for n in names:
        t = store[n]
        flat = t.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        a_flat = analytic[n].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
            fd = (up - down) / (2 * eps)
            worst = max(worst, abs(a_flat[i] - fd) / max(1.0, abs(a_flat[i])))
    return worst


# ---------------------------------------------------------------- networks


@dataclass(frozen=True)
class LayerSpec:
    """kind is dense(in, out), conv2d(in_ch, out_ch, k, stride), maxpool(size),
    relu(), or reshape(h, w, c) / reshape(n)."""

    kind: str
    dims: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in {"dense", "conv2d", "maxpool", "relu", "reshape"}:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if any(int(d) <= 0 for d in self.dims):
            raise ValueError(f"{self.kind}: dims must be positive, got {self.dims}")
        expected = {"dense": 2, "conv2d": 4, "maxpool": 1, "relu": 0}.get(self.kind)
        if expected is not None and len(self.dims) != expected:
            raise ValueError(f"{self.kind}: expected {expected} dims, got {self.dims}")


class Network:
    """A stack of LayerSpecs whose weights live in a shared ParamStore."""

    def __init__(self, specs: Sequence[LayerSpec], input_shape: Sequence[int], store: ParamStore,
                 prefix: str, rng: np.random.Generator, zero_last: bool = False):
        self.specs = list(specs)
        self.prefix = prefix
        self.store = store
        self.input_shape = tuple(input_shape)
        shape = self.input_shape
        self._param_names: list[tuple[str, str] | None] = []
        last_param = max((i for i, s in enumerate(self.specs) if s.kind in ("dense", "conv2d")), default=-1)
        for i, spec in enumerate(self.specs):
            names = None
            if spec.kind == "dense":
                n_in, n_out = spec.dims
                if shape != (n_in,):
                    raise ShapeError(f"layer {i} dense expects ({n_in},), receives {shape}")
                names = (f"{prefix}.{i}.W", f"{prefix}.{i}.b")
                w = glorot_uniform(rng, (n_out, n_in), n_in, n_out)
                if zero_last and i == last_param:
                    w = np.zeros_like(w)
                store.add(names[0], w)
                store.add(names[1], np.zeros(n_out))
                shape = (n_out,)
            elif spec.kind == "conv2d":
                cin, cout, k, stride = spec.dims
                if len(shape) != 3 or shape[2] != cin:
                    raise ShapeError(f"layer {i} conv2d expects (H, W, {cin}), receives {shape}")
                if k > shape[0] or k > shape[1]:
                    raise ShapeError(f"layer {i} conv2d kernel {k} larger than input {shape}")
                names = (f"{prefix}.{i}.K", f"{prefix}.{i}.b")
                shp = (k, k, cin, cout)
                w = glorot_uniform(rng, shp, k * k * cin, k * k * cout)
                if zero_last and i == last_param:
                    w = np.zeros_like(w)
                store.add(names[0], w)
                store.add(names[1], np.zeros(cout))
                shape = ((shape[0] - k) // stride + 1, (shape[1] - k) // stride + 1, cout)
            elif spec.kind == "maxpool":
                (size,) = spec.dims
                if len(shape) != 3 or shape[0] < size or shape[1] < size:
                    raise ShapeError(f"layer {i} maxpool {size} cannot pool {shape}")
                shape = (shape[0] // size, shape[1] // size, shape[2])
            elif spec.kind == "reshape":
                if int(np.prod(spec.dims)) != int(np.prod(shape)):
                    raise ShapeError(f"layer {i} reshape {spec.dims} incompatible with {shape}")
                shape = tuple(spec.dims)
            self._param_names.append(names)
        self.output_shape = shape

    def forward(self, x) -> Tensor:
        x = as_tensor(x)
        lead = x.shape[:x.value.ndim - len(self.input_shape)]
        if x.shape[len(lead):] != self.input_shape:
            raise ShapeError(f"{self.prefix}: input {x.shape} does not end in {self.input_shape}")
        for spec, names in zip(self.specs, self._param_names):
            if spec.kind == "dense":
                x = dense(x, self.store[names[0]], self.store[names[1]])
            elif spec.kind == "conv2d":
                x = conv2d(x, self.store[names[0]], self.store[names[1]], stride=spec.dims[3])
            elif spec.kind == "maxpool":
                x = maxpool2d(x, spec.dims[0])
            elif spec.kind == "relu":
                x = relu(x)
            else:
                x = reshape(x, lead + tuple(spec.dims))
        return x

    __call__ = forward


def conv2d_maxpool_forward(img, spec: LayerSpec, K: Tensor, b: Tensor, pool: bool = True) -> Tensor:
    if spec.kind != "conv2d":
        raise ValueError(f"expected a conv2d spec, got {spec.kind}")
    cin, cout, k, stride = spec.dims
    if K.shape != (k, k, cin, cout):
        raise ShapeError(f"kernel {K.shape} does not match spec {spec.dims}")
    out = conv2d(img, K, b, stride=stride)
    return maxpool2d(out, 2) if pool else out


# ---------------------------------------------------------------- checkpoints


def checkpoint_dict(store: ParamStore, meta: dict | None = None) -> dict:
    doc = {
        "format": CKPT_FORMAT,
        "params": {
            name: {"shape": list(t.shape), "values": [float(v) for v in t.value.reshape(-1)]}
            for name, t in store.items()
        },
    }
    if meta is not None:
        doc["meta"] = meta
    return doc


def save_checkpoint(path: str | Path, store: ParamStore, meta: dict | None = None) -> None:
    # json writes floats with repr(), which round-trips float64 exactly
    Path(path).write_text(json.dumps(checkpoint_dict(store, meta), sort_keys=False) + "\n")


def read_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if doc.get("format") != CKPT_FORMAT:
        raise CheckpointError(f"{path}: format is {doc.get('format')!r}, expected {CKPT_FORMAT!r}")
    values = {}
    for name, entry in doc.get("params", {}).items():
        arr = np.asarray(entry["values"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if arr.size != int(np.prod(shape)):
            raise CheckpointError(f"{name}: {arr.size} values for shape {shape}")
        values[name] = arr.reshape(shape)
    return values, doc.get("meta", {})


def load_checkpoint(path: str | Path, store: ParamStore) -> dict:
    values, meta = read_checkpoint(path)
    store.load_values(values)
    return meta
