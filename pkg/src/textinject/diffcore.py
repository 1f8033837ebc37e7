"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Graphs are built define-by-run: every call to :func:`apply` evaluates the
forward value immediately and records the producer inputs together with a
vector-Jacobian product closure.  :func:`backward` walks the recorded graph
in reverse topological order.

Shape rules (``apply`` raises :class:`ShapeError` when they are violated):

``matmul``            ``(..., n, k) @ (k, m) -> (..., n, m)``; 1-d operands
                      are not accepted.
``add``/``sub``/``mul``  numpy broadcasting between the two operands.
``concat``            equal shapes except along ``axis``.
``slice``             ``key`` is any basic-indexing key (ints, slices).
``embedding_lookup``  ``table (N, D)`` indexed by an integer array ``ids``
                      of any shape, giving ``ids.shape + (D,)``.
``reshape``           total size preserved.
``depthwise_conv``    ``x (B, T, D)`` with ``w (left + 1 + right, D)``;
                      zero padding outside ``[0, T)``.
``reduce_sum``/``logsumexp``/``log_softmax``/``layer_norm``  over ``axis``.
elementwise ops       any shape.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op's shape rule."""


class Node:
    """A value in the computation graph."""

    __slots__ = ("value", "grad", "op", "inputs", "_vjp", "name")

    def __init__(self, value, op="leaf", inputs=(), vjp=None, name=None):
        self.value = value
        self.grad = None
        self.op = op
        self.inputs = inputs
        self._vjp = vjp
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_leaf(self):
        return not self.inputs

    def __repr__(self):
        label = self.name or self.op
        return f"Node({label}, shape={self.value.shape})"

    def __add__(self, other):
        return apply("add", [self, as_node(other)])

    def __radd__(self, other):
        return apply("add", [as_node(other), self])

    def __sub__(self, other):
        return apply("sub", [self, as_node(other)])

    def __rsub__(self, other):
        return apply("sub", [as_node(other), self])

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return apply("scale", [self], factor=float(other))
        return apply("mul", [self, as_node(other)])

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return apply("scale", [self], factor=-1.0)

    def __matmul__(self, other):
        return apply("matmul", [self, as_node(other)])

    def __getitem__(self, key):
        return apply("slice", [self], key=key)


def constant(value, name=None) -> Node:
    return Node(np.asarray(value, dtype=DTYPE), name=name)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


# ---------------------------------------------------------------------------
# op registry

# forward(values, **attrs) -> (out, vjp) where vjp(g) -> tuple of input grads
# (None for an input that receives no gradient).
ForwardFn = Callable[..., Tuple[np.ndarray, Callable[[np.ndarray], Sequence]]]
OPS: Dict[str, ForwardFn] = {}
_ARITY: Dict[str, Optional[int]] = {}


def register_op(name: str, arity: Optional[int] = None):
    """Register a forward function that returns ``(value, vjp)``."""

    def deco(fn):
        OPS[name] = fn
        _ARITY[name] = arity
        return fn

    return deco


def apply(op_kind: str, inputs: Sequence[Node], **attrs) -> Node:
    """Evaluate ``op_kind`` on ``inputs`` and record it for backward."""
    try:
        fn = OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op_kind {op_kind!r}") from None
    inputs = [as_node(x) for x in inputs]
    arity = _ARITY[op_kind]
    if arity is not None and len(inputs) != arity:
        raise ValueError(f"{op_kind} takes {arity} inputs, got {len(inputs)}")
    out, vjp = fn(*[x.value for x in inputs], **attrs)
    return Node(out, op_kind, tuple(inputs), vjp)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


@register_op("add", 2)
def _add(a, b):
    _broadcast_shape("add", a, b)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


@register_op("sub", 2)
def _sub(a, b):
    _broadcast_shape("sub", a, b)
    return a - b, lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape))


@register_op("mul", 2)
def _mul(a, b):
    _broadcast_shape("mul", a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


@register_op("scale", 1)
def _scale(a, factor):
    return a * factor, lambda g: (g * factor,)


@register_op("matmul", 2)
def _matmul(a, b):
    if a.ndim < 2 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a @ b

    def vjp(g):
        ga = g @ b.T
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return out, vjp


@register_op("concat")
def _concat(*xs, axis=-1):
    ref = xs[0]
    ax = axis % ref.ndim
    for x in xs[1:]:
        if x.ndim != ref.ndim or any(
            x.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise ShapeError(
                f"concat(axis={axis}): shapes {[y.shape for y in xs]} disagree off-axis"
            )
    out = np.concatenate(xs, axis=ax)
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return out, vjp


@register_op("slice", 1)
def _slice(a, key):
    try:
        out = a[key]
    except IndexError as e:
        raise ShapeError(f"slice: key {key!r} invalid for shape {a.shape}: {e}") from None

    def vjp(g):
        ga = np.zeros_like(a)
        ga[key] = g
        return (ga,)

    return np.array(out, dtype=DTYPE), vjp


@register_op("embedding_lookup", 1)
def _embedding_lookup(table, ids):
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding_lookup: ids out of range for table {table.shape}"
        )
    out = table[ids]

    def vjp(g):
        gt = np.zeros_like(table)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return out, vjp


@register_op("reshape", 1)
def _reshape(a, shape):
    try:
        out = a.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return out, lambda g: (g.reshape(a.shape),)


@register_op("relu", 1)
def _relu(a):
    on = a > 0
    return a * on, lambda g: (g * on,)


@register_op("sigmoid", 1)
def _sigmoid(a):
    s = _np_sigmoid(a)
    return s, lambda g: (g * s * (1.0 - s),)


@register_op("log_sigmoid", 1)
def _log_sigmoid(a):
    out = -np.logaddexp(0.0, -a)
    return out, lambda g: (g * _np_sigmoid(-a),)


@register_op("tanh", 1)
def _tanh(a):
    t = np.tanh(a)
    return t, lambda g: (g * (1.0 - t * t),)


@register_op("exp", 1)
def _exp(a):
    e = np.exp(a)
    return e, lambda g: (g * e,)


@register_op("log", 1)
def _log(a):
    return np.log(a), lambda g: (g / a,)


@register_op("log_softmax", 1)
def _log_softmax(a, axis=-1):
    out = a - _np_logsumexp(a, axis, keepdims=True)
    p = np.exp(out)
    return out, lambda g: (g - p * g.sum(axis=axis, keepdims=True),)


@register_op("reduce_sum", 1)
def _reduce_sum(a, axis=None, keepdims=False):
    out = np.asarray(a.sum(axis=axis, keepdims=keepdims), dtype=DTYPE)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return out, vjp


@register_op("logsumexp", 1)
def _logsumexp(a, axis=-1, keepdims=False):
    lse = _np_logsumexp(a, axis, keepdims=True)
    out = lse if keepdims else np.squeeze(lse, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * np.exp(a - lse),)

    return np.asarray(out, dtype=DTYPE), vjp


@register_op("layer_norm", 1)
def _layer_norm(a, eps=1e-5):
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return y, vjp


@register_op("depthwise_conv", 2)
def _depthwise_conv(x, w, left, right):
    if x.ndim != 3 or w.ndim != 2 or w.shape != (left + 1 + right, x.shape[2]):
        raise ShapeError(
            f"depthwise_conv: x {x.shape} and w {w.shape} do not match "
            f"left={left}, right={right}"
        )
    b, t, d = x.shape
    xp = np.zeros((b, t + left + right, d), dtype=DTYPE)
    xp[:, left:left + t] = x
    out = np.zeros_like(x)
    for k in range(left + 1 + right):
        out += xp[:, k:k + t] * w[k]

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w)
        for k in range(left + 1 + right):
            gxp[:, k:k + t] += g * w[k]
            gw[k] = (g * xp[:, k:k + t]).sum(axis=(0, 1))
        return gxp[:, left:left + t], gw

    return out, vjp


def _np_sigmoid(a):
    return np.exp(-np.logaddexp(0.0, -a))


def _np_logsumexp(a, axis, keepdims=False):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


# thin wrappers so model code reads naturally
def matmul(a, b):
    return apply("matmul", [a, b])


def concat(xs, axis=-1):
    return apply("concat", list(xs), axis=axis)


def embedding_lookup(table, ids):
    return apply("embedding_lookup", [table], ids=np.asarray(ids))


def reshape(a, shape):
    return apply("reshape", [a], shape=tuple(shape))


def relu(a):
    return apply("relu", [a])


def sigmoid(a):
    return apply("sigmoid", [a])


def log_sigmoid(a):
    return apply("log_sigmoid", [a])


def tanh(a):
    return apply("tanh", [a])


def exp(a):
    return apply("exp", [a])


def log(a):
    return apply("log", [a])


def log_softmax(a, axis=-1):
    return apply("log_softmax", [a], axis=axis)


def reduce_sum(a, axis=None, keepdims=False):
    return apply("reduce_sum", [a], axis=axis, keepdims=keepdims)


def logsumexp(a, axis=-1, keepdims=False):
    return apply("logsumexp", [a], axis=axis, keepdims=keepdims)


def layer_norm(a, eps=1e-5):
    return apply("layer_norm", [a], eps=eps)


def depthwise_conv(x, w, left, right):
    return apply("depthwise_conv", [x, w], left=left, right=right)


# ---------------------------------------------------------------------------
# backward


def _topo_order(root: Node) -> List[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.inputs:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Node) -> None:
    """Populate ``.grad`` on every node reachable from the scalar ``loss``."""
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            node.grad = g if g is not None else np.zeros_like(node.value)
            continue
        node.grad = None
        if g is None:
            continue
        for parent, pg in zip(node.inputs, node._vjp(g)):
            if pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        # drop the closure so intermediate buffers can be released
        node._vjp = None


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ParamStore:
    """Named trainable leaves plus the seed used to initialise them."""

    rng_seed: int = 0
    params: Dict[str, Node] = field(default_factory=dict)

    def __post_init__(self):
        self._rng = np.random.default_rng(self.rng_seed)

    def __getitem__(self, name: str) -> Node:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def add(self, name: str, value) -> Node:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        node = Node(np.array(value, dtype=DTYPE), name=name)
        self.params[name] = node
        return node

    def init_uniform(self, name: str, shape, fan_in: Optional[int] = None) -> Node:
        """Uniform in ``[-s, s]`` with ``s = 1/sqrt(fan_in)``."""
        fan_in = fan_in if fan_in is not None else shape[0]
        s = 1.0 / math.sqrt(fan_in)
        return self.add(name, self._rng.uniform(-s, s, size=shape))

    def init_constant(self, name: str, shape, value: float = 0.0) -> Node:
        return self.add(name, np.full(shape, value, dtype=DTYPE))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self) -> Dict[str, np.ndarray]:
        return {
            k: (p.grad if p.grad is not None else np.zeros_like(p.value))
            for k, p in self.params.items()
        }

    def num_values(self) -> int:
        return int(sum(p.value.size for p in self.params.values()))

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params.items()}

    def load_values(self, values: Dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(values)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in self.params.items():
            v = np.asarray(values[k], dtype=DTYPE)
            if v.shape != p.value.shape:
                raise ShapeError(
                    f"parameter {k!r}: expected shape {p.value.shape}, got {v.shape}"
                )
            p.value = v.copy()

    def all_finite(self) -> bool:
        return all(np.isfinite(p.value).all() for p in self.params.values())


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so the global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm > 0:
        scale = max_norm / total
        for k in grads:
            grads[k] = grads[k] * scale
    return total


def sgd_step(store: ParamStore, lr: float, clip: float = 5.0) -> float:
    """One plain SGD update with global norm clipping; returns the pre-clip norm."""
    grads = store.grads()
    norm = clip_grad_norm(grads, clip)
    for k, p in store.items():
        p.value = p.value - lr * grads[k]
    store.zero_grad()
    return norm


@dataclass
class Adam:
    """Adam with bias correction and global-norm clipping."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 5.0
    steps: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, store: ParamStore, lr: Optional[float] = None) -> float:
        """Apply one update from the gradients in ``store``; returns the pre-clip norm."""
        lr = self.lr if lr is None else lr
        grads = store.grads()
        norm = clip_grad_norm(grads, self.clip)
        self.steps += 1
        c1 = 1.0 - self.beta1 ** self.steps
        c2 = 1.0 - self.beta2 ** self.steps
        for k, p in store.items():
            g = grads[k]
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.value = p.value - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        store.zero_grad()
        return norm


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_VERSION = 1


def save_checkpoint(path, values: Dict[str, np.ndarray]) -> None:
    """Write ``name -> array`` as version byte + length-prefixed LE records."""
    with open(path, "wb") as f:
        f.write(struct.pack("<B", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(values)))
        for name in sorted(values):
            arr = np.ascontiguousarray(values[name], dtype="<f8")
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    (version,) = struct.unpack_from("<B", data, 0)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<I", data, 1)
    pos = 5
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos)
        pos += 8 * size
        out[name] = arr.reshape(shape).astype(DTYPE)
    return out


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class GradCheckReport:
    max_rel_err: Dict[str, float]
    tolerance: float
    failures: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures and all(
            e < self.tolerance for e in self.max_rel_err.values()
        )

    def worst(self) -> Tuple[Optional[str], float]:
        if not self.max_rel_err:
            return None, 0.0
        name = max(self.max_rel_err, key=self.max_rel_err.get)
        return name, self.max_rel_err[name]


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_diff_check(
    loss_fn: Callable[[ParamStore], Node],
    params: ParamStore,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    max_entries: Optional[int] = None,
    seed: int = 0,
    names: Optional[Iterable[str]] = None,
) -> GradCheckReport:
    """Compare backward gradients with central differences.

    ``max_entries`` caps how many coordinates are probed per parameter (a
    seeded random subset); ``None`` probes every coordinate.
    """
    names = list(names) if names is not None else list(params)
    report = GradCheckReport({}, tolerance)
    if not names:
        return report
    params.zero_grad()
    loss = loss_fn(params)
    if not np.isfinite(loss.value).all():
        report.failures = list(names)
        report.max_rel_err = {n: math.inf for n in names}
        return report
    backward(loss)
    analytic = {n: params[n].grad.copy() for n in names}
    params.zero_grad()
    rng = np.random.default_rng(seed)
    for n in names:
        p = params[n]
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = float(loss_fn(params).value)
            flat[i] = orig - step
            down = float(loss_fn(params).value)
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                report.failures.append(n)
                worst = math.inf
                break
            numeric = (up - down) / (2 * step)
            worst = max(worst, relative_error(float(analytic[n].reshape(-1)[i]), numeric))
        report.max_rel_err[n] = worst
    return report
