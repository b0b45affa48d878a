"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run: every op builds a node holding its parents and the vector-
Jacobian callbacks needed for the backward pass. Graphs are rebuilt each
forward pass and traversed once, in reverse topological order, by
``backward``. Double precision throughout; any op producing a non-finite
value raises immediately.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "backward",
    "add", "sub", "mul", "div", "neg", "pow_const", "sqrt", "exp", "sigmoid",
    "tsum", "tmean", "exact_sum", "reshape", "concat", "replicate_pad2d", "slice2d",
    "conv2d", "depthwise_conv2d", "pointwise_conv2d",
    "relu", "leaky_relu", "instance_norm", "bilinear_resize", "l1_loss",
    "AdamState", "adam_step", "Adam", "CosineSchedule", "cosine_lr",
]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fns")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._grad_fns: tuple = ()

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
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
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, p)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, links: list[tuple[Tensor, object]], op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op}: non-finite value produced")
    links = [(p, fn) for p, fn in links if p.requires_grad]
    out = Tensor(data, requires_grad=bool(links))
    if links:
        out._parents = tuple(p for p, _ in links)
        out._grad_fns = tuple(fn for _, fn in links)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _node(
        a.data + b.data,
        [(a, lambda g: _unbroadcast(g, a.data.shape)),
         (b, lambda g: _unbroadcast(g, b.data.shape))],
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _node(
        a.data - b.data,
        [(a, lambda g: _unbroadcast(g, a.data.shape)),
         (b, lambda g: _unbroadcast(-g, b.data.shape))],
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _node(
        a.data * b.data,
        [(a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
         (b, lambda g: _unbroadcast(g * a.data, b.data.shape))],
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data
    return _node(
        out,
        [(a, lambda g: _unbroadcast(g / b.data, a.data.shape)),
         (b, lambda g: _unbroadcast(-g * out / b.data, b.data.shape))],
        "div",
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _node(-a.data, [(a, lambda g: -g)], "neg")


def pow_const(a, p: float) -> Tensor:
    a = _as_tensor(a)
    return _node(
        a.data**p,
        [(a, lambda g: g * p * a.data ** (p - 1))],
        "pow",
    )


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, [(a, lambda g: g * 0.5 / out)], "sqrt")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _node(out, [(a, lambda g: g * out)], "exp")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _node(out, [(a, lambda g: g * out * (1.0 - out))], "sigmoid")


# ---------------------------------------------------------------------------
# reductions / structure
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.data.shape).copy()

    return _node(np.asarray(out), [(a, vjp)], "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / np.asarray(out).size

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g / count, a.data.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg / count, a.data.shape).copy()

    return _node(np.asarray(out), [(a, vjp)], "mean")


def exact_sum(a) -> Tensor:
    """Full reduction with correctly rounded (fsum) summation."""
    a = _as_tensor(a)
    out = np.asarray(math.fsum(a.data.ravel()))
    return _node(out, [(a, lambda g: np.broadcast_to(g, a.data.shape).copy())], "exact_sum")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape).copy()
    return _node(out, [(a, lambda g: g.reshape(a.data.shape))], "reshape")


def concat(tensors, axis: int = 1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            return g[tuple(sl)]

        return vjp

    return _node(out, [(t, make_vjp(i)) for i, t in enumerate(ts)], "concat")


def replicate_pad2d(a, pad: int) -> Tensor:
    """Edge-replicate padding of the last two axes."""
    a = _as_tensor(a)
    if pad < 0:
        raise ValueError("replicate_pad2d: pad must be >= 0")
    if pad == 0:
        return _node(a.data.copy(), [(a, lambda g: g)], "replicate_pad2d")
    h, w = a.data.shape[-2:]
    ri = np.clip(np.arange(h + 2 * pad) - pad, 0, h - 1)
    ci = np.clip(np.arange(w + 2 * pad) - pad, 0, w - 1)
    out = a.data[..., ri[:, None], ci[None, :]]

    def vjp(g):
        dx = np.zeros_like(a.data)
        lead = a.data.shape[:-2]
        gflat = g.reshape((-1,) + g.shape[-2:])
        dflat = dx.reshape((-1,) + dx.shape[-2:])
        for k in range(gflat.shape[0]):
            np.add.at(dflat[k], (ri[:, None], ci[None, :]), gflat[k])
        return dflat.reshape(lead + dx.shape[-2:]) if lead else dflat[0]

    return _node(out, [(a, vjp)], "replicate_pad2d")


def slice2d(a, y0: int, y1: int, x0: int, x1: int) -> Tensor:
    """Crop the last two axes to ``[y0:y1, x0:x1]``."""
    a = _as_tensor(a)
    h, w = a.data.shape[-2:]
    if not (0 <= y0 < y1 <= h and 0 <= x0 < x1 <= w):
        raise ValueError("slice2d: window out of bounds")
    out = a.data[..., y0:y1, x0:x1].copy()

    def vjp(g):
        dx = np.zeros_like(a.data)
        dx[..., y0:y1, x0:x1] = g
        return dx

    return _node(out, [(a, vjp)], "slice2d")


# ---------------------------------------------------------------------------
# neural-network ops
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    n, c, h, w = x.shape
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(
            f"conv2d: padded input {h + 2 * padding}x{w + 2 * padding} smaller than kernel {kh}x{kw}"
        )
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return view, oh, ow, xp.shape


def _col_scatter(dcols: np.ndarray, xp_shape, kh: int, kw: int, stride: int, padding: int):
    """Overlap-add of per-kernel-position gradients back onto the input."""
    dxp = np.zeros(xp_shape)
    oh, ow = dcols.shape[-2:]
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[:, :, i, j]
    if padding:
        return dxp[:, :, padding:-padding, padding:-padding]
    return dxp


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation, input NCHW by kernel OIHW."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    xd, kd = x.data, kernel.data
    if xd.ndim != 4 or kd.ndim != 4 or xd.shape[1] != kd.shape[1]:
        raise ValueError(f"conv2d: incompatible shapes input {xd.shape} vs kernel {kd.shape}")
    o, ci, kh, kw = kd.shape
    view, oh, ow, xp_shape = _im2col(xd, kh, kw, stride, padding)
    n = xd.shape[0]
    cols = np.ascontiguousarray(view).reshape(n, ci * kh * kw, oh * ow)
    out = np.matmul(kd.reshape(o, ci * kh * kw), cols).reshape(n, o, oh, ow)

    def vjp_x(g):
        gk = np.matmul(kd.reshape(o, -1).T, g.reshape(n, o, oh * ow))
        dcols = gk.reshape(n, ci, kh, kw, oh, ow)
        return _col_scatter(dcols, xp_shape, kh, kw, stride, padding)

    def vjp_k(g):
        gmat = np.matmul(g.reshape(n, o, oh * ow), cols.transpose(0, 2, 1)).sum(axis=0)
        return gmat.reshape(kd.shape)

    return _node(out, [(x, vjp_x), (kernel, vjp_k)], "conv2d")


def depthwise_conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel filtering; kernel shape (C, 1, KH, KW)."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    xd, kd = x.data, kernel.data
    if xd.ndim != 4 or kd.ndim != 4 or kd.shape[0] != xd.shape[1] or kd.shape[1] != 1:
        raise ValueError(
            f"depthwise_conv2d: incompatible shapes input {xd.shape} vs kernel {kd.shape}"
        )
    c, _, kh, kw = kd.shape
    view, oh, ow, xp_shape = _im2col(xd, kh, kw, stride, padding)
    cols = np.ascontiguousarray(view)
    out = np.einsum("nchwij,chw->ncij", cols, kd[:, 0], optimize=True)

    def vjp_x(g):
        dcols = np.einsum("ncij,chw->nchwij", g, kd[:, 0], optimize=True)
        return _col_scatter(dcols, xp_shape, kh, kw, stride, padding)

    def vjp_k(g):
        return np.einsum("nchwij,ncij->chw", cols, g, optimize=True)[:, None]

    return _node(out, [(x, vjp_x), (kernel, vjp_k)], "depthwise_conv2d")


def pointwise_conv2d(x, kernel) -> Tensor:
    """1x1 convolution: pure channel mixing; kernel shape (O, C, 1, 1)."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    xd, kd = x.data, kernel.data
    if kd.ndim != 4 or kd.shape[2:] != (1, 1) or kd.shape[1] != xd.shape[1]:
        raise ValueError(
            f"pointwise_conv2d: incompatible shapes input {xd.shape} vs kernel {kd.shape}"
        )
    w2 = kd[:, :, 0, 0]
    out = np.einsum("oc,nchw->nohw", w2, xd, optimize=True)

    def vjp_x(g):
        return np.einsum("oc,nohw->nchw", w2, g, optimize=True)

    def vjp_k(g):
        return np.einsum("nohw,nchw->oc", g, xd, optimize=True)[:, :, None, None]

    return _node(out, [(x, vjp_x), (kernel, vjp_k)], "pointwise_conv2d")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), [(a, lambda g: g * mask)], "relu")


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    scale = np.where(mask, 1.0, slope)
    return _node(a.data * scale, [(a, lambda g: g * scale)], "leaky_relu")


def instance_norm(x, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance per (sample, channel) over the spatial axes."""
    x = _as_tensor(x)
    xd = x.data
    if xd.ndim != 4:
        raise ValueError(f"instance_norm: expected NCHW input, got {xd.shape}")
    if xd.shape[2] * xd.shape[3] < 2:
        raise ValueError("instance_norm: spatial size must be >= 2")
    mu = xd.mean(axis=(2, 3), keepdims=True)
    var = xd.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (xd - mu) * inv

    def vjp(g):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gym = (g * y).mean(axis=(2, 3), keepdims=True)
        return inv * (g - gm - y * gym)

    return _node(y, [(x, vjp)], "instance_norm")


def _linear_interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Row-stochastic 1-D align-corners-false bilinear weights."""
    A = np.zeros((n_out, n_in))
    if n_in == 1:
        A[:, 0] = 1.0
        return A
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    w = src - lo
    A[np.arange(n_out), lo] += 1.0 - w
    A[np.arange(n_out), hi] += w
    return A


def bilinear_resize(x, new_h: int, new_w: int) -> Tensor:
    """Align-corners-false bilinear resampling of the last two axes (NCHW)."""
    x = _as_tensor(x)
    xd = x.data
    if new_h < 1 or new_w < 1:
        raise ValueError("bilinear_resize: target dims must be >= 1")
    h, w = xd.shape[-2:]
    Ah = _linear_interp_matrix(new_h, h)
    Aw = _linear_interp_matrix(new_w, w)
    out = np.einsum("ij,ncjk,lk->ncil", Ah, xd, Aw, optimize=True)

    def vjp(g):
        return np.einsum("ij,ncil,lk->ncjk", Ah, g, Aw, optimize=True)

    return _node(out, [(x, vjp)], "bilinear_resize")


def l1_loss(pred, target) -> Tensor:
    """Mean absolute difference; gradient sign(pred - target) / count."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ValueError(
            f"l1_loss: shape mismatch {pred.data.shape} vs {target.data.shape}"
        )
    diff = pred.data - target.data
    out = np.asarray(np.abs(diff).mean())
    sign = np.sign(diff)
    count = diff.size

    return _node(
        out,
        [(pred, lambda g: g * sign / count), (target, lambda g: -g * sign / count)],
        "l1_loss",
    )


# ---------------------------------------------------------------------------
# backward engine
# ---------------------------------------------------------------------------

def backward(root: Tensor) -> None:
    """Populate .grad of every requires_grad leaf reachable from root."""
    if root.data.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.data.shape}")
    if not root.requires_grad:
        return

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, fn in zip(node._parents, node._grad_fns):
            pg = fn(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# optimizers / schedules
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        arrays = [p.data if isinstance(p, Tensor) else p for p in params]
        return cls(
            m=[np.zeros_like(a) for a in arrays],
            v=[np.zeros_like(a) for a in arrays],
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(params, grads, state: AdamState, lr: float) -> None:
    """In-place bias-corrected Adam update over parallel param/grad lists."""
    arrays = [p.data if isinstance(p, Tensor) else p for p in params]
    if len(arrays) != len(grads) or len(arrays) != len(state.m):
        raise ValueError("adam_step: params/grads/state length mismatch")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        if g is None:
            continue
        if a.shape != np.shape(g):
            raise ValueError(f"adam_step: grad shape {np.shape(g)} != param shape {a.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        a -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


class Adam:
    """Convenience wrapper binding an AdamState to a list of Tensors."""

    def __init__(self, params: list[Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState.for_params(self.params, beta1, beta2, eps)

    def step(self, lr: float | None = None) -> None:
        grads = [p.grad if p.grad is not None else None for p in self.params]
        adam_step(self.params, grads, self.state, self.lr if lr is None else lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class CosineSchedule:
    lr_start: float
    lr_end: float
    total_steps: int

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("CosineSchedule: total_steps must be positive")


def cosine_lr(schedule: CosineSchedule, step: int) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(
            f"cosine_lr: step {step} outside [0, {schedule.total_steps}]"
        )
    return schedule.lr_end + 0.5 * (schedule.lr_start - schedule.lr_end) * (
        1.0 + math.cos(math.pi * step / schedule.total_steps)
    )
