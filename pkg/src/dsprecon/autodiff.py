"""Reverse-mode automatic differentiation over the operator set the
generator network needs, plus the Adam optimizer.

Values are plain numpy arrays of shape (batch, channels, height, width);
a scalar loss is a 0-d array. A :class:`Tape` records every operation in
execution order together with a closure that maps the output gradient to
input gradients; :func:`backward` replays the record in reverse,
accumulating gradients additively where a node fans out.

Precision is a property of the tape (float32 for speed, float64 for
gradient checking) and is never mixed inside one tape. A tape is owned
by a single fit session; concurrent sessions need separate tapes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, EmptyMaskError, ParameterError, ShapeError


class Workspace:
    """Reusable scratch buffers keyed by (shape, dtype).

    Large conv scratch arrays otherwise churn through mmap/munmap every
    iteration, which dominates runtime on small machines. Reusing a
    workspace invalidates tapes built against its previous cycle, which
    is fine under the single-owner tape rule: the fit loop drops the old
    tape, calls :meth:`reset`, and builds the next one.
    """

    def __init__(self):
        self._bufs: dict = {}
        self._idx: dict = {}

    def reset(self) -> None:
        for key in self._idx:
            self._idx[key] = 0

    def take(self, shape: tuple, dtype) -> np.ndarray:
        key = (shape, np.dtype(dtype).str)
        i = self._idx.get(key, 0)
        lst = self._bufs.setdefault(key, [])
        if i >= len(lst):
            lst.append(np.empty(shape, dtype=dtype))
        self._idx[key] = i + 1
        return lst[i]


class Node:
    """A value recorded on a tape."""

    __slots__ = ("value", "tape", "id")

    def __init__(self, value: np.ndarray, tape: "Tape", node_id: int):
        self.value = value
        self.tape = tape
        self.id = node_id

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Execution record for one forward pass."""

    def __init__(self, dtype=np.float32, workspace: Workspace | None = None):
        self.dtype = np.dtype(dtype)
        self.workspace = workspace
        self._entries: list[tuple[int, tuple[int, ...], Callable]] = []
        self._next_id = 0

    def leaf(self, value: np.ndarray) -> Node:
        """Register an input or parameter; gradients accumulate here."""
        arr = np.ascontiguousarray(value, dtype=self.dtype)
        return self._node(arr)

    def _node(self, value: np.ndarray) -> Node:
        node = Node(value, self, self._next_id)
        self._next_id += 1
        return node

    def _record(self, out: Node, inputs: tuple[Node, ...], backward_fn: Callable) -> None:
        self._entries.append((out.id, tuple(n.id for n in inputs), backward_fn))

    def scratch(self, shape: tuple, dtype) -> np.ndarray:
        if self.workspace is not None:
            return self.workspace.take(shape, dtype)
        return np.empty(shape, dtype=dtype)


def _check4(x: Node, name: str) -> None:
    if x.value.ndim != 4:
        raise ShapeError(f"{name}: expected a (n, c, h, w) tensor, got shape {x.value.shape}")


# ---------------------------------------------------------------------------
# operators

def conv2d(x: Node, weight: Node, bias: Node | None, stride: int = 1) -> Node:
    """3x3 (or 1x1) cross-correlation with zero padding 1 (0 for 1x1).

    Output spatial dims are ceil(h/stride) x ceil(w/stride). Implemented
    as im2col + one GEMM per batch item. ``bias`` may be None for
    projection convolutions that carry weights only.
    """
    _check4(x, "conv2d input")
    if stride not in (1, 2):
        raise ParameterError(f"stride must be 1 or 2, got {stride}")
    tape = x.tape
    n, ci, h, w = x.value.shape
    co, wci, kh, kw = weight.value.shape
    if wci != ci:
        raise ShapeError(f"conv2d: input has {ci} channels, weight expects {wci}")
    if kh != kw or kh not in (1, 3):
        raise ShapeError(f"conv2d: kernel must be 3x3 or 1x1, got {kh}x{kw}")
    pad = 1 if kh == 3 else 0
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1

    if pad:
        xp = tape.scratch((n, ci, h + 2, w + 2), tape.dtype)
        xp[:, :, 0, :] = 0; xp[:, :, -1, :] = 0
        xp[:, :, 1:-1, 0] = 0; xp[:, :, 1:-1, -1] = 0
        xp[:, :, 1:-1, 1:-1] = x.value
    else:
        xp = x.value
    he, we = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    cols = tape.scratch((n, ci, kh, kw, oh, ow), tape.dtype)
    for di in range(kh):
        for dj in range(kw):
            cols[:, :, di, dj] = xp[:, :, di:di + he:stride, dj:dj + we:stride]
    cols2 = cols.reshape(n, ci * kh * kw, oh * ow)
    w2 = weight.value.reshape(co, ci * kh * kw)
    y = np.empty((n, co, oh * ow), dtype=tape.dtype)
    for b in range(n):
        np.matmul(w2, cols2[b], out=y[b])
    if bias is not None:
        y += bias.value.reshape(1, co, 1)
    out = tape._node(y.reshape(n, co, oh, ow))

    def bwd(dy: np.ndarray):
        dy2 = dy.reshape(n, co, oh * ow)
        dw2 = np.zeros_like(w2)
        dcols = tape.scratch((n, ci * kh * kw, oh * ow), tape.dtype)
        for b in range(n):
            dw2 += dy2[b] @ cols2[b].T
            np.matmul(w2.T, dy2[b], out=dcols[b])
        dcols = dcols.reshape(n, ci, kh, kw, oh, ow)
        dxp = tape.scratch((n, ci, h + 2 * pad, w + 2 * pad), tape.dtype)
        dxp[...] = 0
        for di in range(kh):
            for dj in range(kw):
                dxp[:, :, di:di + he:stride, dj:dj + we:stride] += dcols[:, :, di, dj]
        dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
        if bias is None:
            return dx, dw2.reshape(weight.value.shape)
        return dx, dw2.reshape(weight.value.shape), dy2.sum(axis=(0, 2))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    tape._record(out, inputs, bwd)
    return out


def batch_norm(x: Node, gamma: Node, beta: Node, eps: float = 1e-5) -> Node:
    """Per-channel standardization over (batch, height, width), training
    statistics always: the fit and the final inference see the same single
    input, so running averages would add state for nothing."""
    _check4(x, "batch_norm input")
    tape = x.tape
    n, c, h, w = x.value.shape
    if gamma.value.shape != (c,) or beta.value.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must have shape ({c},)")
    m = n * h * w
    mean = x.value.mean(axis=(0, 2, 3), keepdims=True)
    var = x.value.var(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + tape.dtype.type(eps))
    xhat = (x.value - mean) * inv
    out = tape._node(gamma.value.reshape(1, c, 1, 1) * xhat + beta.value.reshape(1, c, 1, 1))

    def bwd(dy: np.ndarray):
        dbeta = dy.sum(axis=(0, 2, 3))
        dgamma = (dy * xhat).sum(axis=(0, 2, 3))
        dxhat = dy * gamma.value.reshape(1, c, 1, 1)
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        dx = (inv / m) * (m * dxhat - s1 - xhat * s2)
        return dx, dgamma, dbeta

    tape._record(out, (x, gamma, beta), bwd)
    return out


def leaky_relu(x: Node, alpha: float = 0.2) -> Node:
    """y = x for x >= 0 else alpha*x; the subgradient at 0 is taken as 1."""
    if not (0.0 <= alpha < 1.0):
        raise ParameterError(f"leaky_relu slope must be in [0, 1), got {alpha}")
    tape = x.tape
    a = tape.dtype.type(alpha)
    nonneg = x.value >= 0
    out = tape._node(np.where(nonneg, x.value, a * x.value))

    def bwd(dy: np.ndarray):
        return (np.where(nonneg, dy, a * dy),)

    tape._record(out, (x,), bwd)
    return out


_interp_cache: dict = {}


def _interp_matrix(size: int, dtype) -> np.ndarray:
    """(2*size, size) bilinear weights, align-corners-false, edge-clamped:
    source coordinate of output row d is clip((d + 0.5)/2 - 0.5, 0, size-1)."""
    key = (size, np.dtype(dtype).str)
    if key not in _interp_cache:
        W = np.zeros((2 * size, size), dtype=dtype)
        for d in range(2 * size):
            s = min(max((d + 0.5) / 2.0 - 0.5, 0.0), size - 1.0)
            i0 = int(np.floor(s))
            f = s - i0
            i1 = min(i0 + 1, size - 1)
            W[d, i0] += 1.0 - f
            W[d, i1] += f
        _interp_cache[key] = W
    return _interp_cache[key]


def upsample_bilinear2x(x: Node) -> Node:
    """Double both spatial dims by bilinear interpolation. The operator is
    linear and separable, so it is applied as two matrix products and the
    backward pass is the transpose."""
    _check4(x, "upsample input")
    n, c, h, w = x.value.shape
    if h < 2 or w < 2:
        raise ShapeError(f"upsample needs h, w >= 2, got {h}x{w}")
    tape = x.tape
    Wh = _interp_matrix(h, tape.dtype)
    Ww = _interp_matrix(w, tape.dtype)
    out = tape._node(np.matmul(np.matmul(Wh, x.value), Ww.T))

    def bwd(dy: np.ndarray):
        return (np.matmul(np.matmul(Wh.T, dy), Ww),)

    tape._record(out, (x,), bwd)
    return out


def add(x: Node, y: Node) -> Node:
    if x.value.shape != y.value.shape:
        raise ShapeError(f"add: shapes {x.value.shape} and {y.value.shape} differ")
    tape = x.tape
    out = tape._node(x.value + y.value)

    def bwd(dy: np.ndarray):
        return dy, dy

    tape._record(out, (x, y), bwd)
    return out


def sigmoid(x: Node) -> Node:
    tape = x.tape
    v = x.value
    y = np.empty_like(v)
    pos = v >= 0
    np.exp(-v, out=y, where=pos)
    y[pos] = 1.0 / (1.0 + y[pos])
    neg = ~pos
    t = np.exp(v[neg])
    y[neg] = t / (1.0 + t)
    out = tape._node(y)

    def bwd(dy: np.ndarray):
        return (dy * y * (1.0 - y),)

    tape._record(out, (x,), bwd)
    return out


def masked_mse(pred: Node, target: np.ndarray, mask01: np.ndarray) -> Node:
    """Mean squared misfit over entries where mask01 == 1.

    The mean (rather than the raw squared-sum) leaves the minimizer
    unchanged while making one learning rate meaningful across grid
    sizes. Gradient is identically zero at masked-out entries.
    """
    tape = pred.tape
    target = np.asarray(target, dtype=tape.dtype)
    mask01 = np.asarray(mask01, dtype=tape.dtype)
    if pred.value.shape != target.shape or pred.value.shape != mask01.shape:
        raise ShapeError(f"masked_mse: shapes {pred.value.shape}/{target.shape}/{mask01.shape} differ")
    msum = float(mask01.sum())
    if msum == 0.0:
        raise EmptyMaskError("masked_mse: mask selects no entries")
    diff = (pred.value - target) * mask01
    out = tape._node(np.asarray((diff * diff).sum() / tape.dtype.type(msum), dtype=tape.dtype))

    def bwd(dy: np.ndarray):
        return (dy * (2.0 / msum) * diff,)

    tape._record(out, (pred,), bwd)
    return out


def tsum(x: Node) -> Node:
    """Sum of all entries (scalar head for tests and gradient checks)."""
    tape = x.tape
    out = tape._node(np.asarray(x.value.sum(), dtype=tape.dtype))

    def bwd(dy: np.ndarray):
        return (np.broadcast_to(dy, x.value.shape).astype(tape.dtype),)

    tape._record(out, (x,), bwd)
    return out


def assert_finite(x: Node | np.ndarray, label: str = "tensor") -> None:
    v = x.value if isinstance(x, Node) else x
    if not np.all(np.isfinite(v)):
        raise ContractError(f"{label} contains non-finite values")


# ---------------------------------------------------------------------------
# backward pass

def backward(loss: Node, tape: Tape) -> dict[int, np.ndarray]:
    """Reverse sweep. Returns gradients keyed by node id; leaves that do
    not influence the loss are simply absent."""
    if loss.value.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones((), dtype=tape.dtype)}
    for out_id, input_ids, bwd in reversed(tape._entries):
        dy = grads.get(out_id)
        if dy is None:
            continue
        dinputs = bwd(dy)
        for nid, d in zip(input_ids, dinputs):
            if nid in grads:
                grads[nid] = grads[nid] + d
            else:
                grads[nid] = d
    return grads


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    """First/second moment estimates, one pair per parameter tensor."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def init(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new parameter arrays."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("adam_step: params/grads/state lengths differ")
    t = state.t + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    new_params = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * (g * g)
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        new_params.append((p - lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype))
    state.t = t
    return new_params, state


# ---------------------------------------------------------------------------
# finite-difference validation

@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    n_skipped: int
    tol: float
    skipped: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.n_checked > 0 and self.max_rel_err <= self.tol


def grad_check(fn: Callable, inputs: Sequence[np.ndarray], step: float = 1e-5,
               tol: float = 1e-5, max_coords: int | None = None, seed: int = 0,
               kink_distance: Callable | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn`` against central differences.

    ``fn(tape, *nodes)`` must build and return a scalar node. Runs in
    float64. Coordinates whose distance to a non-differentiable kink
    (as reported by ``kink_distance(inputs, input_index)``) is below
    10*step are skipped and listed, not failed.
    """
    inputs = [np.asarray(a, dtype=np.float64) for a in inputs]
    tape = Tape(dtype=np.float64)
    nodes = [tape.leaf(a) for a in inputs]
    loss = fn(tape, *nodes)
    grads = backward(loss, tape)

    rng = np.random.default_rng(seed)
    max_err = 0.0
    n_checked = 0
    skipped: list = []
    for idx, a in enumerate(inputs):
        g = grads.get(nodes[idx].id)
        g = np.zeros_like(a) if g is None else np.asarray(g)
        flat = a.size
        coords = np.arange(flat)
        if max_coords is not None and flat > max_coords:
            coords = rng.choice(flat, size=max_coords, replace=False)
        kdist = kink_distance(inputs, idx) if kink_distance is not None else None
        for c in coords:
            if kdist is not None and kdist.ravel()[c] < 10.0 * step:
                skipped.append((idx, int(c)))
                continue
            num = _central_diff(fn, inputs, idx, int(c), step)
            ana = g.ravel()[c]
            err = abs(ana - num) / (abs(ana) + abs(num) + 1e-12)
            max_err = max(max_err, err)
            n_checked += 1
    return GradCheckReport(max_err, n_checked, len(skipped), tol, skipped)


def _central_diff(fn, inputs, idx, coord, step) -> float:
    def eval_at(delta: float) -> float:
        shifted = [a.copy() for a in inputs]
        shifted[idx].ravel()[coord] += delta
        tape = Tape(dtype=np.float64)
        nodes = [tape.leaf(a) for a in shifted]
        return float(fn(tape, *nodes).value)

    return (eval_at(step) - eval_at(-step)) / (2.0 * step)
