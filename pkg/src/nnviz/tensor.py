"""Dense float32 tensors on a reverse-mode tape.

A tensor here is simply a C-contiguous float32 numpy array. Ops append
nodes to a Tape; each node stores its output value, the ids of its input
nodes (always earlier on the tape, so the tape is topological by
construction), a forward closure for bit-exact replay, and a backward
closure returning one gradient per input.

Everything is strict float32 with no broadcasting beyond bias addition.
ReLU's subgradient at exactly 0 is 0, and maxpool ties go to the first
window position in row-major order, so gradients are deterministic.
"""

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import _kernels

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes do not line up; names the offending axis."""


def tensor(data) -> np.ndarray:
    """Coerce to a contiguous float32 array (0-d stays 0-d)."""
    a = np.asarray(data, dtype=DTYPE)
    return a if a.flags["C_CONTIGUOUS"] else np.ascontiguousarray(a)


def _require_finite(a: np.ndarray, what: str) -> None:
    if not np.isfinite(a).all():
        raise ValueError(f"{what} contains non-finite entries")


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    ctx: tuple = ()
    fwd: Callable | None = None
    bwd: Callable | None = None
    name: str | None = None


class Var:
    """Handle to one tape node."""

    __slots__ = ("tape", "id")

    def __init__(self, tape: "Tape", node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Var(id={self.id}, op={self.tape.nodes[self.id].op}, shape={self.shape})"


class Tape:
    """Append-only op record; confine to one thread while building."""

    def __init__(self, check_finite: bool = False):
        self.nodes: list[Node] = []
        self.check_finite = check_finite

    def leaf(self, value, name: str | None = None) -> Var:
        v = tensor(value)
        _require_finite(v, f"leaf {name or ''}")
        self.nodes.append(Node(op="leaf", inputs=(), value=v, name=name))
        return Var(self, len(self.nodes) - 1)

    def push(self, op: str, inputs: tuple[Var, ...], value: np.ndarray,
             ctx: tuple = (), fwd=None, bwd=None) -> Var:
        for x in inputs:
            if x.tape is not self:
                raise ValueError(f"{op}: input Var belongs to a different tape")
        if self.check_finite:
            _require_finite(value, f"{op} output")
        self.nodes.append(Node(op=op, inputs=tuple(x.id for x in inputs),
                               value=value, ctx=ctx, fwd=fwd, bwd=bwd))
        return Var(self, len(self.nodes) - 1)

    def value(self, node_id: int) -> np.ndarray:
        return self.nodes[node_id].value

    def replay(self) -> None:
        """Recompute every non-leaf value from the leaves, in place."""
        for node in self.nodes:
            if node.fwd is not None:
                node.value = node.fwd(node.ctx,
                                      *(self.nodes[i].value for i in node.inputs))


# --------------------------------------------------------------------- ops

def conv2d(x: Var, kernel: Var, bias: Var, stride: int = 1, pad: int = 0) -> Var:
    """2D cross-correlation, NCHW x OIHW -> NOH'W', zero padding."""
    xv, kv, bv = x.value, kernel.value, bias.value
    if xv.ndim != 4:
        raise ShapeError(f"conv2d: input must be NCHW, got rank {xv.ndim}")
    if kv.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be OIHW, got rank {kv.ndim}")
    if bv.ndim != 1 or bv.shape[0] != kv.shape[0]:
        raise ShapeError(
            f"conv2d: bias axis 0 is {bv.shape}, expected ({kv.shape[0]},)")
    if xv.shape[1] != kv.shape[1]:
        raise ShapeError(
            f"conv2d: input channel axis 1 is {xv.shape[1]}, "
            f"kernel expects {kv.shape[1]}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if pad < 0:
        raise ValueError(f"conv2d: pad must be >= 0, got {pad}")
    n, ci, h, w = xv.shape
    co, _, kh, kw = kv.shape
    ho, wo = _kernels._out_hw(h, w, kh, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d: output dims {ho}x{wo} collapse for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {stride}, pad {pad}")
    ctx = (stride, pad, h, w, kh, kw)

    def fwd(ctx, xv, kv, bv):
        stride, pad = ctx[0], ctx[1]
        return _kernels.conv2d_forward(xv, kv, bv, stride, pad)

    def bwd(ctx, g, xv, kv, bv):
        stride, pad, h, w, kh, kw = ctx
        g = np.ascontiguousarray(g, dtype=DTYPE)
        dx = _kernels.conv2d_backward_input(g, kv, stride, pad, h, w)
        dk = _kernels.conv2d_backward_kernel(g, xv, kh, kw, stride, pad)
        db = g.sum(axis=(0, 2, 3))
        return dx, dk, db

    return x.tape.push("conv2d", (x, kernel, bias), fwd(ctx, xv, kv, bv),
                       ctx, fwd, bwd)


def relu(x: Var) -> Var:
    def fwd(ctx, xv):
        return np.maximum(xv, 0.0).astype(DTYPE)

    def bwd(ctx, g, xv):
        return (g * (xv > 0),)

    return x.tape.push("relu", (x,), fwd((), x.value), (), fwd, bwd)


def _pool_windows(xv):
    n, c, h, w = xv.shape
    # row-major window order (0,0),(0,1),(1,0),(1,1) on the last axis
    return (xv.reshape(n, c, h // 2, 2, w // 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h // 2, w // 2, 4))


def maxpool2(x: Var) -> Var:
    """2x2 window, stride 2. Ties route the gradient to the first window
    position in row-major order."""
    xv = x.value
    if xv.ndim != 4:
        raise ShapeError(f"maxpool2: input must be NCHW, got rank {xv.ndim}")
    n, c, h, w = xv.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: H and W must be even, got {h}x{w}")

    def fwd(ctx, xv):
        return _pool_windows(xv).max(axis=-1)

    def bwd(ctx, g, xv):
        win = _pool_windows(xv)
        arg = win.argmax(axis=-1)  # argmax returns the first maximum
        scat = np.zeros_like(win)
        np.put_along_axis(scat, arg[..., None], g[..., None], axis=-1)
        n, c, h2, w2, _ = scat.shape
        dx = (scat.reshape(n, c, h2, w2, 2, 2)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(n, c, 2 * h2, 2 * w2))
        return (np.ascontiguousarray(dx),)

    return x.tape.push("maxpool2", (x,), fwd((), xv), (), fwd, bwd)


def gap(x: Var) -> Var:
    """Global average pooling NCHW -> NC."""
    xv = x.value
    if xv.ndim != 4:
        raise ShapeError(f"gap: input must be NCHW, got rank {xv.ndim}")
    z = xv.shape[2] * xv.shape[3]

    def fwd(ctx, xv):
        return xv.mean(axis=(2, 3), dtype=DTYPE)

    def bwd(ctx, g, xv):
        (z,) = ctx
        n, c, h, w = xv.shape
        dx = np.broadcast_to((g / z)[:, :, None, None], xv.shape)
        return (np.ascontiguousarray(dx, dtype=DTYPE),)

    return x.tape.push("gap", (x,), fwd((), xv), (z,), fwd, bwd)


def linear(x: Var, weight: Var, bias: Var) -> Var:
    """x[N,K] . weight[C,K]^T + bias[C] -> [N,C]."""
    xv, wv, bv = x.value, weight.value, bias.value
    if xv.ndim != 2 or wv.ndim != 2:
        raise ShapeError("linear: input and weight must be rank 2")
    if xv.shape[1] != wv.shape[1]:
        raise ShapeError(
            f"linear: input axis 1 is {xv.shape[1]}, weight axis 1 is {wv.shape[1]}")
    if bv.shape != (wv.shape[0],):
        raise ShapeError(
            f"linear: bias shape {bv.shape}, expected ({wv.shape[0]},)")

    def fwd(ctx, xv, wv, bv):
        return (xv @ wv.T + bv).astype(DTYPE)

    def bwd(ctx, g, xv, wv, bv):
        return g @ wv, np.ascontiguousarray(g.T @ xv), g.sum(axis=0)

    return x.tape.push("linear", (x, weight, bias), fwd((), xv, wv, bv),
                       (), fwd, bwd)


def matmul(a: Var, b: Var) -> Var:
    """Plain a[N,K] @ b[K,M] for graphs where both operands carry gradients."""
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(
            f"matmul: inner axes disagree, {av.shape} @ {bv.shape}")

    def fwd(ctx, av, bv):
        return (av @ bv).astype(DTYPE)

    def bwd(ctx, g, av, bv):
        return np.ascontiguousarray(g @ bv.T), np.ascontiguousarray(av.T @ g)

    return a.tape.push("matmul", (a, b), fwd((), av, bv), (), fwd, bwd)


def reshape(x: Var, shape: tuple[int, ...]) -> Var:
    xv = x.value
    if int(np.prod(shape)) != xv.size:
        raise ShapeError(f"reshape: cannot view {xv.shape} as {shape}")

    def fwd(ctx, xv):
        return np.ascontiguousarray(xv).reshape(ctx[0])

    def bwd(ctx, g, xv):
        return (np.ascontiguousarray(g).reshape(xv.shape),)

    return x.tape.push("reshape", (x,), fwd((tuple(shape),), xv),
                       (tuple(shape),), fwd, bwd)


def flatten(x: Var) -> Var:
    """NCHW -> N,(C*H*W)."""
    n = x.value.shape[0]
    return reshape(x, (n, int(np.prod(x.value.shape[1:]))))


def sigmoid(x: Var) -> Var:
    def fwd(ctx, xv):
        e = np.exp(-np.abs(xv))
        return np.where(xv >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(DTYPE)

    def bwd(ctx, g, xv):
        s = fwd((), xv)
        return (g * s * (1.0 - s),)

    return x.tape.push("sigmoid", (x,), fwd((), x.value), (), fwd, bwd)


def tanh(x: Var) -> Var:
    def fwd(ctx, xv):
        return np.tanh(xv, dtype=DTYPE)

    def bwd(ctx, g, xv):
        t = np.tanh(xv, dtype=DTYPE)
        return (g * (1.0 - t * t),)

    return x.tape.push("tanh", (x,), fwd((), x.value), (), fwd, bwd)


def softmax(x: Var) -> Var:
    """Row softmax on [N,C], max-subtracted for stability."""
    if x.value.ndim != 2:
        raise ShapeError("softmax: input must be rank 2 [N,C]")

    def fwd(ctx, xv):
        e = np.exp(xv - xv.max(axis=1, keepdims=True))
        return (e / e.sum(axis=1, keepdims=True)).astype(DTYPE)

    def bwd(ctx, g, xv):
        s = fwd((), xv)
        dot = (g * s).sum(axis=1, keepdims=True)
        return (s * (g - dot),)

    return x.tape.push("softmax", (x,), fwd((), x.value), (), fwd, bwd)


_BCE_EPS = 1e-7


def bce_loss(probs: Var, targets: Var) -> Var:
    """Mean binary cross-entropy over all N*C entries.

    Probabilities are clamped to [eps, 1-eps]; the gradient treats the
    clamp as pass-through so saturated-wrong predictions still recover.
    """
    pv, tv = probs.value, targets.value
    if pv.shape != tv.shape:
        raise ShapeError(
            f"bce_loss: probs shape {pv.shape} != targets shape {tv.shape}")
    if not np.all((tv == 0) | (tv == 1)):
        raise ValueError("bce_loss: targets must be exactly 0 or 1")

    def fwd(ctx, pv, tv):
        pc = np.clip(pv, _BCE_EPS, 1.0 - _BCE_EPS).astype(np.float64)
        per = -(tv * np.log(pc) + (1.0 - tv) * np.log1p(-pc))
        return np.asarray(per.mean(), dtype=DTYPE)

    def bwd(ctx, g, pv, tv):
        pc = np.clip(pv, _BCE_EPS, 1.0 - _BCE_EPS)
        inv = 1.0 / pv.size
        dp = (pc - tv) / (pc * (1.0 - pc)) * inv * g
        dt = -(np.log(pc) - np.log1p(-pc)) * inv * g
        return dp.astype(DTYPE), dt.astype(DTYPE)

    return probs.tape.push("bce_loss", (probs, targets), fwd((), pv, tv),
                           (), fwd, bwd)


# ---------------------------------------------------------------- backward

def guided_relu_backward(grad_in: np.ndarray, fwd_input: np.ndarray) -> np.ndarray:
    """Guided rule: pass gradient only where both the forward input and the
    incoming gradient are positive."""
    return grad_in * (fwd_input > 0) * (grad_in > 0)


def backward(tape: Tape, seed_node, seed, wanted: Iterable,
             relu_rule: str = "vanilla") -> dict[int, np.ndarray]:
    """Reverse-mode gradients of <seed, seed_node> w.r.t. every wanted node.

    Returns a map node id -> gradient array of that node's shape. Nodes the
    seed does not reach get zeros. relu_rule="guided" swaps every ReLU
    backward for the guided rule; everything else is untouched.
    """
    if relu_rule not in ("vanilla", "guided"):
        raise ValueError(f"unknown relu_rule {relu_rule!r}")
    sid = seed_node.id if isinstance(seed_node, Var) else int(seed_node)
    if not 0 <= sid < len(tape.nodes):
        raise KeyError(f"dangling node id {sid}")
    seed = tensor(seed)
    if seed.shape != tape.nodes[sid].value.shape:
        raise ShapeError(
            f"seed shape {seed.shape} != node value shape "
            f"{tape.nodes[sid].value.shape}")
    wanted_ids = [w.id if isinstance(w, Var) else int(w) for w in wanted]
    for wid in wanted_ids:
        if not 0 <= wid < len(tape.nodes):
            raise KeyError(f"dangling node id {wid}")

    grads: dict[int, np.ndarray] = {sid: seed.copy()}
    for nid in range(sid, -1, -1):
        node = tape.nodes[nid]
        g = grads.get(nid)
        if g is None or not node.inputs:
            continue
        invals = [tape.nodes[i].value for i in node.inputs]
        if node.op == "relu" and relu_rule == "guided":
            in_grads = (guided_relu_backward(g, invals[0]),)
        else:
            in_grads = node.bwd(node.ctx, g, *invals)
        for iid, ig in zip(node.inputs, in_grads):
            if ig is None:
                continue
            ig = ig.astype(DTYPE, copy=False)
            if iid in grads:
                grads[iid] = grads[iid] + ig
            else:
                grads[iid] = ig
    return {wid: grads.get(wid, np.zeros_like(tape.nodes[wid].value))
            for wid in wanted_ids}


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float) -> None:
    """In-place p <- p - lr*g for every named parameter."""
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    missing = [name for name in params if name not in grads]
    if missing:
        raise KeyError(f"missing gradient for parameter(s): {missing}")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(
                f"gradient shape {g.shape} != parameter {name} shape {p.shape}")
        p -= (lr * g).astype(DTYPE, copy=False)
