"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Each operation records its parents and a closure mapping the output gradient
to per-parent gradients. ``backward`` walks the recorded nodes in decreasing
creation order, which is a valid topological order and makes gradient
accumulation order fixed (and training bit-reproducible).
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_counter = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = ""
        self._id = next(_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    # arithmetic -------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, power: float):
        return pow_(self, power)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``.

    Gradients accumulate additively into existing ``.grad`` buffers. The
    recorded graph is released afterwards.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad)

    pending: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for node_id in sorted(nodes, reverse=True):
        node = nodes[node_id]
        g = pending.pop(node_id, None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = pending.get(parent._id)
            pending[parent._id] = pg if prev is None else prev + pg
        node._parents = ()
        node._backward = None


# elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)), "div")


def pow_(a: Tensor, power: float) -> Tensor:
    return _make(a.data ** power, (a,), lambda g: (g * power * a.data ** (power - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def elementwise(a: Tensor, fn: str) -> Tensor:
    if fn == "sigmoid":
        return sigmoid(a)
    if fn == "relu":
        return relu(a)
    raise ValueError(f"unknown elementwise function {fn!r}")


def similarity(d: Tensor, eps: float) -> Tensor:
    """log((d + 1) / (d + eps)), elementwise."""
    out = np.log((d.data + 1.0) / (d.data + eps))
    return _make(out, (d,), lambda g: (g * (1.0 / (d.data + 1.0) - 1.0 / (d.data + eps)),), "similarity")


# shape ------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    def _bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)
    return _make(a.data[index], (a,), _bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


# reductions ---------------------------------------------------------------

def _expand(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,),
                 lambda g: (_expand(g, a.shape, axis, keepdims).copy(),), "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,),
                 lambda g: (_expand(g, a.shape, axis, keepdims) / n,), "mean")


def sequential_sum(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Left-to-right sum along ``axis``; same rounding as a plain Python loop."""
    x = np.moveaxis(x, axis, -1)
    acc = x[..., 0].copy()
    for t in range(1, x.shape[-1]):
        acc += x[..., t]
    return acc


def seqsum(a: Tensor, axis: int = -1) -> Tensor:
    """Differentiable :func:`sequential_sum` (keeps reductions order-stable)."""
    return _make(sequential_sum(a.data, axis), (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),), "seqsum")


def topk_mean(a: Tensor, k: int, largest: bool = True) -> Tensor:
    """Mean of the k largest (or smallest) entries along the last axis.

    Ties are resolved by index order, which only decides which of several equal
    values are averaged; the value is unaffected.
    """
    n = a.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    key = -a.data if largest else a.data
    idx = np.argsort(key, axis=-1, kind="stable")[..., :k]
    vals = np.take_along_axis(a.data, idx, axis=-1)
    out = sequential_sum(vals) / k

    def _bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, np.repeat(g[..., None] / k, k, axis=-1), axis=-1)
        return (full,)
    return _make(out, (a,), _bw, "topk_mean")


def masked_min(a: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Minimum over entries where ``mask`` is true; the first minimiser gets the gradient."""
    mask = np.broadcast_to(mask, a.shape)
    if not mask.any(axis=axis).all():
        raise ValueError("masked_min: a slice has no selectable entries")
    vals = np.where(mask, a.data, np.inf)
    idx = np.argmin(vals, axis=axis)
    out = np.take_along_axis(vals, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def _bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)
    return _make(out, (a,), _bw, "masked_min")


def l2_norm(a: Tensor, axes) -> Tensor:
    """Euclidean norm over ``axes``; gradient taken as 0 where the norm is 0."""
    out = np.sqrt((a.data * a.data).sum(axis=axes))

    def _bw(g):
        safe = np.where(out > 0, out, 1.0)
        scale = np.where(out > 0, g / safe, 0.0)
        return (a.data * np.expand_dims(scale, axes),)
    return _make(out, (a,), _bw, "l2_norm")


def log_softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)
    return _make(out, (a,), lambda g: (g - probs * g.sum(axis=-1, keepdims=True),), "log_softmax")


# linear algebra and spatial ops ---------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _make(a.data @ b.data, (a, b), _bw, "matmul")


def _fold_edges(g: np.ndarray, p: int, h: int, w: int) -> np.ndarray:
    """Adjoint of edge padding on the last two axes: border gradients go to the edge pixels."""
    core = g[..., p:p + h, :].copy()
    core[..., 0, :] += g[..., :p, :].sum(axis=-2)
    core[..., -1, :] += g[..., p + h:, :].sum(axis=-2)
    out = core[..., p:p + w].copy()
    out[..., 0] += core[..., :p].sum(axis=-1)
    out[..., -1] += core[..., p + w:].sum(axis=-1)
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0,
           padding_mode: str = "zeros") -> Tensor:
    """2-D cross-correlation over ``[C,H,W]`` or ``[N,C,H,W]`` input.

    ``padding_mode`` is "zeros" or "edge" (replicate the border pixels).
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if padding_mode not in ("zeros", "edge"):
        raise ValueError(f"padding_mode must be 'zeros' or 'edge', got {padding_mode!r}")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    n, c, h, w = xd.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"conv2d dimension error: input has {c} channels, kernel expects {ci}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ValueError(f"conv2d dimension error: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    mode = "constant" if padding_mode == "zeros" else "edge"
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)), mode=mode) if padding else xd
    xpt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xpt[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    cols2 = cols.reshape(c * kh * kw, n * ho * wo)
    w2 = weight.data.reshape(o, -1)
    out = (w2 @ cols2).reshape(o, n, ho, wo).transpose(1, 0, 2, 3) + bias.data[None, :, None, None]
    if squeeze:
        out = out[0]

    def _bw(g):
        g4 = g[None] if squeeze else g
        gm = g4.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (gm @ cols2.T).reshape(weight.shape)
        gb = g4.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ gm).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((c, n, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += gcols[:, i, j]
            if padding_mode == "edge" and padding:
                gx = _fold_edges(gxp, padding, h, w).transpose(1, 0, 2, 3)
            else:
                gx = gxp[:, :, padding:padding + h, padding:padding + w].transpose(1, 0, 2, 3)
            if squeeze:
                gx = gx[0]
        return gx, gw, gb
    return _make(np.ascontiguousarray(out), (x, weight, bias), _bw, "conv2d")


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    *lead, h, w = x.shape
    if h % size or w % size:
        raise ValueError(f"avg_pool2d: {h}x{w} not divisible by {size}")
    out = x.data.reshape(*lead, h // size, size, w // size, size).mean(axis=(-3, -1))

    def _bw(g):
        return (np.repeat(np.repeat(g, size, axis=-2), size, axis=-1) / (size * size),)
    return _make(out, (x,), _bw, "avg_pool2d")


def _corner_aligned(n_in: int, n_out: int):
    if n_out < n_in:
        raise ValueError(f"bilinear_upsample: target size {n_out} smaller than input {n_in}")
    if n_in == 1:
        zeros = np.zeros(n_out, dtype=np.intp)
        return zeros, zeros, np.zeros(n_out)
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1)) if n_out > 1 else np.zeros(1)
    i0 = np.minimum(np.floor(pos).astype(np.intp), n_in - 1)
    t = pos - i0
    i1 = np.where(t > 0, np.minimum(i0 + 1, n_in - 1), i0)
    return i0, i1, t


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    i0, i1, t = _corner_aligned(n_in, n_out)
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1.0 - t)
    np.add.at(m, (np.arange(n_out), i1), t)
    return m


def bilinear_upsample_array(x: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear resize of the last two axes (no gradient)."""
    h, w = target
    r0, r1, rt = _corner_aligned(x.shape[-2], h)
    c0, c1, ct = _corner_aligned(x.shape[-1], w)
    # a + t*(b - a) is exact when a == b, so constants stay exact
    rows = x[..., r0, :] + rt[:, None] * (x[..., r1, :] - x[..., r0, :])
    return rows[..., c0] + ct * (rows[..., c1] - rows[..., c0])


def bilinear_upsample(x: Tensor, target: tuple[int, int]) -> Tensor:
    """Corner-aligned bilinear upsampling of the last two axes to ``target``."""
    x = as_tensor(x)
    out = bilinear_upsample_array(x.data, target)
    ry = _interp_matrix(x.shape[-2], target[0])
    rx = _interp_matrix(x.shape[-1], target[1])
    return _make(out, (x,), lambda g: (ry.T @ g @ rx,), "bilinear_upsample")


def squared_distances(z: Tensor, p: Tensor) -> Tensor:
    """||z_l - p_j||^2 for patches ``z`` [N,L,C] and prototypes ``p`` [m,C] -> [N,m,L].

    Computed from explicit differences, so a patch equal to a prototype gives
    exactly 0.
    """
    z, p = as_tensor(z), as_tensor(p)
    if z.shape[-1] != p.shape[-1]:
        raise ValueError(f"channel mismatch: patches have {z.shape[-1]}, prototypes {p.shape[-1]}")
    n, L, c = z.shape
    m = p.shape[0]
    out = np.empty((n, m, L))
    for j in range(m):
        diff = z.data - p.data[j]
        out[:, j, :] = (diff * diff).sum(axis=-1)

    def _bw(g):
        gz = 2.0 * (z.data * g.sum(axis=1)[..., None] - np.einsum("nml,mc->nlc", g, p.data))
        gflat = g.transpose(1, 0, 2).reshape(m, n * L)
        gp = 2.0 * (p.data * gflat.sum(axis=1)[:, None] - gflat @ z.data.reshape(n * L, c))
        return gz, gp
    return _make(out, (z, p), _bw, "squared_distances")


# gradient checking ----------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(v < self.tolerance for v in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def lines(self) -> list[str]:
        return [f"{name},{err:.3e},{self.checked[name]},{'pass' if err < self.tolerance else 'FAIL'}"
                for name, err in self.max_rel_error.items()]


def grad_check(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], epsilon=1e-5,
               tolerance: float = 1e-4, max_per_param: int | None = None,
               rng: np.random.Generator | None = None, scale_floor: float = 0.0) -> GradCheckReport:
    """Compare autodiff gradients against central finite differences.

    ``loss_fn`` must rebuild the loss from the current contents of ``params``.
    Relative error is ``|a - n| / max(|a|, |n|, 1e-8, scale_floor * max|a|)``,
    the last term taken over the whole tensor; it keeps coordinates whose
    gradient sits at the finite-difference noise level from dominating.

    ``epsilon`` may be a sequence of step sizes. Each coordinate then keeps
    its best agreement over the steps: on a piecewise-smooth loss a large step
    can straddle a ReLU or top-k switch and a small one drowns in roundoff,
    while a wrong analytic gradient disagrees at every step.
    ``max_per_param`` limits the number of coordinates probed per tensor
    (chosen by ``rng``).
    """
    steps = [float(e) for e in np.atleast_1d(epsilon)]
    if not steps or min(steps) <= 0:
        raise ValueError("epsilon must be positive")
    for t in params.values():
        t.requires_grad = True
        t.grad = None
    loss = loss_fn()
    if loss.requires_grad:
        backward(loss)
    report = GradCheckReport(tolerance=tolerance)
    for name, t in params.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            rng = rng or np.random.default_rng(0)
            coords = np.sort(rng.choice(flat.size, max_per_param, replace=False))
        worst = 0.0
        floor = max(1e-8, scale_floor * float(np.abs(analytic).max(initial=0.0)))
        with no_grad():
            for i in coords:
                orig = flat[i]
                a = analytic.reshape(-1)[i]
                best = math.inf
                for h in steps:
                    flat[i] = orig + h
                    hi = loss_fn().item()
                    flat[i] = orig - h
                    lo = loss_fn().item()
                    flat[i] = orig
                    num = (hi - lo) / (2 * h)
                    best = min(best, abs(a - num) / max(abs(a), abs(num), floor))
                    if best < tolerance:
                        break
                worst = max(worst, best)
        report.max_rel_error[name] = worst
        report.checked[name] = len(coords)
    return report
