"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Every differentiable operation builds a :class:`Node` holding its value, its
parents and a closure that maps the output gradient to one gradient per
parent.  :func:`backward` walks the graph in reverse topological order.

Arrays are float32 by default.  Passing float64 arrays keeps every op in
float64, which is what the finite-difference tests rely on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError

DEFAULT_DTYPE = np.float32

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Node:
    """A value in the computation graph."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(
        self,
        value: np.ndarray,
        requires_grad: bool = False,
        parents: tuple["Node", ...] = (),
        backward_fn: Optional[BackwardFn] = None,
        name: Optional[str] = None,
    ):
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.value

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Node":
        return Node(self.value)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Node(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(as_node(other, self.dtype)))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Node):
            raise TypeError("division by a Node is not supported")
        return mul(self, 1.0 / other)

    def sum(self) -> "Node":
        return sum_all(self)

    def mean(self) -> "Node":
        return mean_all(self)

    def reshape(self, *shape) -> "Node":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def tensor(data, requires_grad: bool = False, dtype=None, name: Optional[str] = None) -> Node:
    """Wrap array-like data into a leaf node."""
    arr = np.array(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
    return Node(arr, requires_grad=requires_grad, name=name)


def as_node(x, dtype=None) -> Node:
    if isinstance(x, Node):
        return x
    return Node(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def _result(value: np.ndarray, parents: tuple[Node, ...], backward_fn: BackwardFn) -> Node:
    if any(p.requires_grad for p in parents):
        return Node(value, True, parents, backward_fn)
    return Node(value)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _dtype_pair(a, b):
    if isinstance(a, Node) and not isinstance(b, Node):
        return a, as_node(b, a.dtype)
    if isinstance(b, Node) and not isinstance(a, Node):
        return as_node(a, b.dtype), b
    return as_node(a), as_node(b)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Node:
    a, b = _dtype_pair(a, b)
    try:
        out = a.value + b.value
    except ValueError as exc:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), backward)


def mul(a, b) -> Node:
    a, b = _dtype_pair(a, b)
    try:
        out = a.value * b.value
    except ValueError as exc:
        raise DimensionError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(g * b.value, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.value, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward)


def neg(a: Node) -> Node:
    return _result(-a.value, (a,), lambda g: (-g,))


def relu(x: Node) -> Node:
    mask = x.value > 0
    return _result(x.value * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Node) -> Node:
    out = _sigmoid(x.value)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def exp(x: Node) -> Node:
    out = np.exp(x.value)
    return _result(out, (x,), lambda g: (g * out,))


def log(x: Node) -> Node:
    return _result(np.log(x.value), (x,), lambda g: (g / x.value,))


def clip(x: Node, lo: float, hi: float) -> Node:
    """Hard clamp; the gradient is zero wherever the clamp is active."""
    out = np.clip(x.value, lo, hi)
    inside = (x.value > lo) & (x.value < hi)
    return _result(out, (x,), lambda g: (g * inside,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split by sign so large |v| never overflows exp
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_all(x: Node) -> Node:
    out = np.asarray(x.value.sum(), dtype=x.dtype)
    return _result(out, (x,), lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


def mean_all(x: Node) -> Node:
    n = x.value.size
    out = np.asarray(x.value.mean(), dtype=x.dtype)
    return _result(out, (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def dot(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise DimensionError(f"dot: shapes {a.shape} and {b.shape} differ")
    out = np.asarray(np.sum(a.value * b.value), dtype=a.dtype)
    return _result(out, (a, b), lambda g: (g * b.value, g * a.value))


def reshape(x: Node, shape) -> Node:
    out = x.value.reshape(shape)
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def stack_scalars(items: Sequence[Node]) -> Node:
    """Stack scalar nodes into a vector."""
    out = np.array([it.value.reshape(()) for it in items], dtype=items[0].dtype)

    def backward(g):
        return tuple(np.asarray(g[i], dtype=items[i].dtype) for i in range(len(items)))

    return _result(out, tuple(items), backward)


def concat_channels(xs: Sequence[Node]) -> Node:
    if not xs:
        raise DimensionError("concat_channels: no operands")
    ref = xs[0].shape
    for i, x in enumerate(xs):
        if x.value.ndim != len(ref) or x.shape[0] != ref[0] or x.shape[2:] != ref[2:]:
            raise DimensionError(f"concat_channels: operand {i} has shape {x.shape}, expected (*, C, {ref[2:]})")
    out = np.concatenate([x.value for x in xs], axis=1)
    bounds = np.cumsum([0] + [x.shape[1] for x in xs])

    def backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return _result(out, tuple(xs), backward)


def gather_channels(x: Node, idx: np.ndarray) -> Node:
    """Select channels ``idx`` (axis 1)."""
    idx = np.asarray(idx, dtype=np.intp)

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, idx] = g
        return (full,)

    return _result(x.value[:, idx], (x,), backward)


def scatter_channels(x: Node, idx: np.ndarray, width: int) -> Node:
    """Place the channels of ``x`` at positions ``idx`` of a zero tensor of ``width`` channels."""
    idx = np.asarray(idx, dtype=np.intp)
    if len(idx) != x.shape[1]:
        raise DimensionError(f"scatter_channels: {len(idx)} indices for {x.shape[1]} channels")
    out = np.zeros((x.shape[0], width) + x.shape[2:], dtype=x.dtype)
    out[:, idx] = x.value
    return _result(out, (x,), lambda g: (g[:, idx],))


def global_avg_pool(x: Node) -> Node:
    n, c, h, w = x.shape
    out = x.value.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),)

    return _result(out, (x,), backward)


def linear(x: Node, weight: Node, bias: Optional[Node] = None) -> Node:
    if x.value.ndim != 2 or weight.value.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.value @ weight.value.T
    if bias is not None:
        out = out + bias.value
        parents = (x, weight, bias)
    else:
        parents = (x, weight)

    def backward(g):
        grads = [g @ weight.value, g.T @ x.value]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _result(out, parents, backward)


# ---------------------------------------------------------------------------
# losses


def log_softmax(x: Node, axis: int = -1) -> Node:
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward)


def softmax(values: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain softmax on arrays (no graph)."""
    shifted = values - values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy_logits(logits: Node, labels) -> Node:
    """Mean cross-entropy between raw logits [N, C] and integer labels."""
    labels = np.asarray(labels)
    if logits.value.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy_logits: logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"cross_entropy_logits: labels must lie in [0, {c})")
    logp = log_softmax(logits, axis=1)
    onehot = np.zeros((n, c), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1.0
    return neg(mean_rows(logp, onehot))


def mean_rows(logp: Node, weights: np.ndarray) -> Node:
    """``mean_n sum_c weights[n, c] * logp[n, c]`` with constant weights."""
    n = logp.shape[0]
    out = np.asarray((logp.value * weights).sum() / n, dtype=logp.dtype)
    return _result(out, (logp,), lambda g: (g * weights / n,))


# ---------------------------------------------------------------------------
# convolution and batch norm


def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Node, weight: Node, stride: int = 1, padding: int = 0) -> Node:
    """2-d cross-correlation of ``x`` [N, Cin, H, W] with ``weight`` [Cout, Cin, k, k].

    Implemented as im2col + one matrix product.  The column buffer is laid out
    as [Cin, k, k, N, H', W'] so both passes avoid large transposes.
    """
    if x.value.ndim != 4:
        raise DimensionError(f"conv2d: input must be rank 4, got shape {x.shape}")
    if weight.value.ndim != 4:
        raise DimensionError(f"conv2d: weight must be rank 4, got shape {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if wcin != cin:
        raise DimensionError(f"conv2d: weight expects {wcin} input channels, input has {cin}")
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"conv2d: weight kernel must be square and odd, got {k}x{k2}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    ho, wo = _conv_out(h, k, stride, padding), _conv_out(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: input {h}x{w} too small for kernel {k} with padding {padding}")

    dtype = x.dtype
    xp = np.zeros((cin, n, h + 2 * padding, w + 2 * padding), dtype=dtype)
    xp[:, :, padding : padding + h, padding : padding + w] = x.value.transpose(1, 0, 2, 3)
    cols = np.empty((cin, k, k, n, ho, wo), dtype=dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    cols = cols.reshape(cin * k * k, n * ho * wo)
    wmat = weight.value.reshape(cout, cin * k * k)
    out = (wmat @ cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)

    def backward(g):
        gm = g.transpose(1, 0, 2, 3).reshape(cout, n * ho * wo)
        gw = (gm @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gm).reshape(cin, k, k, n, ho, wo)
            gxp = np.zeros((cin, n, h + 2 * padding, w + 2 * padding), dtype=dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j]
            gx = np.ascontiguousarray(gxp[:, :, padding : padding + h, padding : padding + w].transpose(1, 0, 2, 3))
        return gx, gw

    return _result(out, (x, weight), backward)


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, dtype=DEFAULT_DTYPE) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.mean.copy(), self.var.copy(), self.momentum, self.eps)


def batchnorm2d(x: Node, gamma: Node, beta: Node, state: BatchNormState, training: bool) -> Node:
    """Per-channel batch normalisation of an NCHW tensor.

    In training mode the batch statistics normalise the input and the running
    statistics are updated in place (unbiased variance, fixed momentum).
    """
    if x.value.ndim != 4:
        raise DimensionError(f"batchnorm2d: input must be rank 4, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm2d: gamma {gamma.shape} / beta {beta.shape} do not match {c} channels")
    g4 = gamma.value.reshape(1, c, 1, 1)
    if not training:
        inv = (1.0 / np.sqrt(state.var + state.eps)).astype(x.dtype).reshape(1, c, 1, 1)
        xhat = (x.value - state.mean.reshape(1, c, 1, 1)) * inv
        out = xhat * g4 + beta.value.reshape(1, c, 1, 1)

        def backward_eval(g):
            return g * g4 * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return _result(out.astype(x.dtype), (x, gamma, beta), backward_eval)

    m = x.shape[0] * x.shape[2] * x.shape[3]
    mean = x.value.mean(axis=(0, 2, 3))
    centered = x.value - mean.reshape(1, c, 1, 1)
    var = (centered * centered).mean(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = centered * inv.reshape(1, c, 1, 1)
    out = xhat * g4 + beta.value.reshape(1, c, 1, 1)

    mom = state.momentum
    unbiased = var * (m / max(m - 1, 1))
    state.mean[...] = (1 - mom) * state.mean + mom * mean
    state.var[...] = (1 - mom) * state.var + mom * unbiased

    def backward(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            gxhat = g * g4
            gx = (inv.reshape(1, c, 1, 1) / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            )
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# backward pass


def _topological_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if root.value.size != 1:
        raise ContractError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(_topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# optimisation


class Adam:
    """Adam with classic (coupled) L2 weight decay added to the gradient."""

    def __init__(
        self,
        params: Iterable[Node],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def reset_momentum(self) -> None:
        """Drop the first moment so past gradients stop moving the parameters."""
        for m in self.m:
            m[...] = 0.0

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in parameter {p.name or p.shape}")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.value
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            step = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.value -= step.astype(p.value.dtype)


def adam_step(optimizer: Adam) -> None:
    optimizer.step()


# ---------------------------------------------------------------------------
# initialisation and random numbers


class Rng:
    """Seeded random stream built on the Philox counter-based generator."""

    def __init__(self, seed: int, *keys: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.keys = tuple(int(k) for k in keys)
        seq = np.random.SeedSequence([self.seed, *self.keys])
        self.gen = np.random.Generator(np.random.Philox(seq))

    def derive(self, *keys: int) -> "Rng":
        """An independent stream identified by ``keys`` under the same seed."""
        return Rng(self.seed, *self.keys, *keys)

    def uniform(self, low=0.0, high=1.0, size=None, dtype=np.float64) -> np.ndarray:
        return self.gen.uniform(low, high, size).astype(dtype)

    def normal(self, loc=0.0, scale=1.0, size=None, dtype=np.float64) -> np.ndarray:
        return self.gen.normal(loc, scale, size).astype(dtype)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self.gen.choice(n, size=size, replace=replace)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self.gen.integers(low, high, size)


def kaiming_uniform(shape: tuple[int, ...], fan_in: int, rng: Rng, dtype=DEFAULT_DTYPE) -> np.ndarray:
    bound = math.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape, dtype=dtype)


def parameter(value: np.ndarray, name: Optional[str] = None) -> Node:
    return Node(np.ascontiguousarray(value), requires_grad=True, name=name)
