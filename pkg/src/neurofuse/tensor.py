"""Minimal define-by-run tensor library with reverse-mode differentiation.

Every operation that receives a tracked input records a :class:`Node` with a
monotonically increasing sequence number.  :func:`backward` collects the nodes
reachable from a scalar loss and replays their backward rules in reverse
recording order, so each node is visited exactly once.

Arrays are float32 by default; float64 inputs are preserved so that the
finite-difference oracle can run the same forward code in double precision.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

_SEQ = itertools.count()
_GRAD_ENABLED = True
_KINK_TRACE: list | None = None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording inside the block (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def trace_kinks() -> Iterator[list]:
    """Collect the ReLU masks and max-pool argmax maps of every op in the block.

    Two forward passes with equal traces lie in the same linear piece of the
    network, which is what a finite-difference check needs.
    """
    global _KINK_TRACE
    prev = _KINK_TRACE
    _KINK_TRACE = []
    try:
        yield _KINK_TRACE
    finally:
        _KINK_TRACE = prev


def _as_float(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype == np.float64:
        return arr
    return arr.astype(np.float32, copy=False)


@dataclass(eq=False)
class Node:
    seq: int
    name: str
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    # maps the output gradient to one gradient (or None) per input
    rule: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """An n-dimensional float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "tracked", "node")

    def __init__(self, data, tracked: bool = False):
        self.data = _as_float(data)
        self.grad: np.ndarray | None = None
        self.tracked = bool(tracked)
        self.node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", tracked" if self.tracked else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def tensor(data, tracked: bool = False) -> Tensor:
    return Tensor(data, tracked=tracked)


def _unwrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(name: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], rule) -> Tensor:
    out = Tensor(out_data)
    if _GRAD_ENABLED and any(t.tracked for t in inputs):
        out.tracked = True
        out.node = Node(next(_SEQ), name, inputs, out, rule)
    return out


@dataclass
class Tape:
    """The recorded operations reachable from one loss, in recording order."""

    nodes: list[Node] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Node] = []
        stack = [loss]
        while stack:
            t = stack.pop()
            node = t.node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node.inputs)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def replay(self, loss: Tensor, seed_grad: np.ndarray) -> list[Node]:
        """Run backward rules in reverse order; returns the nodes visited."""
        grads: dict[int, np.ndarray] = {id(loss): seed_grad}
        visited = []
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            visited.append(node)
            if g is None:
                continue
            in_grads = node.rule(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.tracked:
                    continue
                if inp.node is None:
                    inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
                else:
                    key = id(inp)
                    grads[key] = ig if key not in grads else grads[key] + ig
        return visited


def backward(loss: Tensor) -> Tape:
    if not isinstance(loss, Tensor) or not loss.tracked:
        raise ValueError("backward() requires a tracked tensor produced by recorded operations")
    if loss.data.size != 1:
        raise ValueError(f"backward() requires a scalar loss, got shape {loss.shape}")
    tape = Tape.from_loss(loss)
    if loss.node is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        return tape
    tape.replay(loss, np.ones_like(loss.data))
    return tape


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = _unwrap(a), _unwrap(b)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b) -> Tensor:
    a, b = _unwrap(a), _unwrap(b)
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def sum(x) -> Tensor:  # noqa: A001
    x = _unwrap(x)
    shape, dtype = x.shape, x.dtype
    return _record(
        "sum", np.asarray(x.data.sum(), dtype=dtype), (x,),
        lambda g: (np.broadcast_to(g, shape).astype(dtype),),
    )


def concat(a, b) -> Tensor:
    """Join two [N, F] tensors along the feature axis, ``a`` first."""
    a, b = _unwrap(a), _unwrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ValueError(f"concat: incompatible shapes {a.shape} and {b.shape}")
    fa = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _record("concat", out, (a, b), lambda g: (g[:, :fa], g[:, fa:]))


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = _unwrap(x)
    orig = x.shape
    return _record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def flatten(x) -> Tensor:
    x = _unwrap(x)
    return reshape(x, (x.shape[0], -1))


def relu(x) -> Tensor:
    x = _unwrap(x)
    mask = x.data > 0
    if _KINK_TRACE is not None:
        _KINK_TRACE.append(("relu", np.packbits(mask).tobytes()))
    return _record("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def linear(x, weight, bias) -> Tensor:
    x, weight, bias = _unwrap(x), _unwrap(weight), _unwrap(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data

    def rule(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return _record("linear", xd @ wd.T + bias.data, (x, weight, bias), rule)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


NUM_CLASSES = 3


def softmax_cross_entropy(logits, targets) -> tuple[Tensor, np.ndarray]:
    """Mean cross-entropy over the batch and the softmax probabilities."""
    logits = _unwrap(logits)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2 or logits.shape[1] != NUM_CLASSES:
        raise ValueError(f"softmax_cross_entropy expects [N, {NUM_CLASSES}] logits, got {logits.shape}")
    n = logits.shape[0]
    if targets.shape[0] != n:
        raise ValueError(f"{targets.shape[0]} targets for {n} logit rows")
    if np.any((targets < 0) | (targets >= NUM_CLASSES)):
        raise ValueError(f"targets must lie in [0, {NUM_CLASSES}), got {targets.tolist()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    probs = np.exp(logp)
    loss = -logp[np.arange(n), targets].mean()

    def rule(g):
        d = probs.copy()
        d[np.arange(n), targets] -= 1
        return (d * (g / n),)

    out = _record("softmax_cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), rule)
    return out, probs


# ---------------------------------------------------------------------------
# volumetric ops


def conv_output_extent(extent: int, k: int, padding: int = 0, stride: int = 1, dilation: int = 1) -> int:
    span = dilation * (k - 1) + 1
    if extent + 2 * padding < span:
        raise ValueError(
            f"window span {span} (k={k}, d={dilation}) exceeds padded extent {extent + 2 * padding}"
        )
    return (extent + 2 * padding - span) // stride + 1


def pool_output_extent(extent: int, k: int, stride: int) -> int:
    if extent < k:
        raise ValueError(f"pool window {k} exceeds extent {extent}")
    return (extent - k) // stride + 1


def _offsets(k: int):
    return itertools.product(range(k), repeat=3)


def _window(arr: np.ndarray, a: int, b: int, c: int, step: int, dil: int, out: tuple[int, int, int]):
    """Strided view selecting kernel offset (a, b, c) for every output site."""
    do, ho, wo = out
    return arr[
        ...,
        a * dil: a * dil + step * (do - 1) + 1: step,
        b * dil: b * dil + step * (ho - 1) + 1: step,
        c * dil: c * dil + step * (wo - 1) + 1: step,
    ]


def conv3d(x, weight, bias, padding: int = 0, stride: int = 1, dilation: int = 1) -> Tensor:
    """3D cross-correlation over [N, C, D, H, W] with cubic kernels."""
    x, weight, bias = _unwrap(x), _unwrap(weight), _unwrap(bias)
    if x.data.ndim != 5 or weight.data.ndim != 5:
        raise ValueError(f"conv3d expects 5-D input and weight, got {x.shape} and {weight.shape}")
    n, cin, *spatial = x.shape
    cout, wcin, k, k2, k3 = weight.shape
    if wcin != cin:
        raise ValueError(f"conv3d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if not (k == k2 == k3):
        raise ValueError(f"conv3d expects a cubic kernel, got {weight.shape}")
    if bias.shape != (cout,):
        raise ValueError(f"conv3d bias {bias.shape} does not match weight {weight.shape}")
    if padding < 0 or stride < 1 or dilation < 1:
        raise ValueError("conv3d requires padding >= 0, stride >= 1, dilation >= 1")
    out_sp = tuple(conv_output_extent(e, k, padding, stride, dilation) for e in spatial)
    dtype = np.result_type(x.dtype, weight.dtype)
    xd = x.data
    if padding:
        p = padding
        xd = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    # channel-major view so each window flattens to [C_in, N * sites]
    xt = xd.transpose(1, 0, 2, 3, 4)
    wd = weight.data
    acc = np.zeros((cout, n * int(np.prod(out_sp))), dtype=dtype)
    for a, b, c in _offsets(k):
        cols = _window(xt, a, b, c, stride, dilation, out_sp).reshape(cin, -1)
        acc += wd[:, :, a, b, c] @ cols
    acc += bias.data[:, None]
    out = np.ascontiguousarray(acc.reshape((cout, n) + out_sp).transpose(1, 0, 2, 3, 4))

    padded_shape = xd.shape

    def rule(g):
        gt = g.transpose(1, 0, 2, 3, 4).reshape(cout, -1)
        gw = np.zeros_like(wd) if weight.tracked else None
        gx = np.zeros((cin, n) + padded_shape[2:], dtype=dtype) if x.tracked else None
        for a, b, c in _offsets(k):
            if gw is not None:
                cols = _window(xt, a, b, c, stride, dilation, out_sp).reshape(cin, -1)
                gw[:, :, a, b, c] = gt @ cols.T
            if gx is not None:
                view = _window(gx, a, b, c, stride, dilation, out_sp)
                view += (wd[:, :, a, b, c].T @ gt).reshape(view.shape)
        if gx is not None:
            gx = gx.transpose(1, 0, 2, 3, 4)
            if padding:
                p = padding
                gx = gx[:, :, p:-p, p:-p, p:-p]
            gx = np.ascontiguousarray(gx)
        gb = gt.sum(axis=1) if bias.tracked else None
        return gx, gw, gb

    return _record("conv3d", out, (x, weight, bias), rule)


def maxpool3d(x, k: int, stride: int) -> Tensor:
    """Max over cubic windows; ties route gradient to the first offset in row-major order."""
    x = _unwrap(x)
    if x.data.ndim != 5:
        raise ValueError(f"maxpool3d expects 5-D input, got {x.shape}")
    out_sp = tuple(pool_output_extent(e, k, stride) for e in x.shape[2:])
    xd = x.data
    out = None
    arg = np.zeros(x.shape[:2] + out_sp, dtype=np.int16)
    for idx, (a, b, c) in enumerate(_offsets(k)):
        win = _window(xd, a, b, c, stride, 1, out_sp)
        if out is None:
            out = win.copy()
            continue
        better = win > out
        np.copyto(out, win, where=better)
        arg[better] = idx
    if _KINK_TRACE is not None:
        _KINK_TRACE.append(("maxpool", arg.tobytes()))

    def rule(g):
        gx = np.zeros_like(xd)
        for idx, (a, b, c) in enumerate(_offsets(k)):
            hit = arg == idx
            if hit.any():
                _window(gx, a, b, c, stride, 1, out_sp)[...] += np.where(hit, g, 0)
        return (gx,)

    return _record("maxpool3d", out, (x,), rule)


def instance_norm3d(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = _unwrap(x), _unwrap(gamma), _unwrap(beta)
    if x.data.ndim != 5:
        raise ValueError(f"instance_norm3d expects 5-D input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"instance_norm3d: gamma {gamma.shape} / beta {beta.shape} vs {c} channels")
    m = int(np.prod(x.shape[2:]))
    if m < 2:
        raise ValueError("instance_norm3d needs at least 2 spatial elements per channel")
    axes = (2, 3, 4)
    xd = x.data
    mean = xd.mean(axis=axes, keepdims=True)
    cen = xd - mean
    var = (cen * cen).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = cen * inv
    g5 = gamma.data.reshape(1, c, 1, 1, 1)
    out = (xhat * g5 + beta.data.reshape(1, c, 1, 1, 1)).astype(xd.dtype, copy=False)

    def rule(g):
        gg = (g * xhat).sum(axis=(0,) + axes) if gamma.tracked else None
        gb = g.sum(axis=(0,) + axes) if beta.tracked else None
        gx = None
        if x.tracked:
            dxhat = g * g5
            gx = inv * (
                dxhat
                - dxhat.mean(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
            )
        return gx, gg, gb

    return _record("instance_norm3d", out, (x, gamma, beta), rule)
