"""Dense N-D tensors with reverse-mode automatic differentiation.

Covers exactly the operations the segmentation graphs need: 3D cross-correlation,
ReLU/sigmoid/softmax, average/max pooling, nearest upsampling, channel
concatenation, elementwise arithmetic with two attention broadcast patterns,
and scalar reductions for the losses.

Values are stored as float32. Reductions and convolution contractions
accumulate in float64 before casting back, and every op uses a fixed
(row-major, kernel-major) summation order, so repeated runs are bitwise
identical.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "set_debug_checks",
    "add",
    "mul_broadcast",
    "relu",
    "sigmoid",
    "softmax_channels",
    "conv3d",
    "global_avg_pool",
    "max_pool3d",
    "nearest_upsample",
    "concat_channels",
    "slice_channels",
    "tensor_sum",
    "grad_check",
    "max_rel_err",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an op contract."""


_debug_checks = os.environ.get("MMTS_DEBUG_CHECKS", "") not in ("", "0")


def set_debug_checks(enabled):
    """Enable per-op NaN/Inf assertions on values and gradients."""
    global _debug_checks
    _debug_checks = bool(enabled)


def _check_finite(arr, what):
    if _debug_checks and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")


def _as_f32(data):
    return np.asarray(data, dtype=np.float32)


class Tensor:
    """A float32 array plus an optional slot in a reverse-mode graph.

    Tensors produced by ops are treated as immutable. `grad` accumulates
    across `backward` calls until explicitly cleared.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = _as_f32(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(np.float32, copy=False)
        _check_finite(self.grad, "gradient")

    def backward(self):
        """Accumulate gradients of this scalar into every graph leaf.

        Repeated calls without zeroing keep accumulating.
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward() requires a scalar loss, got shape {self.data.shape}"
            )
        order = _topo_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar used by the loss expressions --

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul_broadcast(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul_broadcast(self, -1.0)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -float(other))

    def __rsub__(self, other):
        return add(-self, float(other))

    def __truediv__(self, other):
        return div(self, other)

    def sum(self):
        return tensor_sum(self)


def _topo_order(root):
    """Reverse topological order over the ancestors of `root` (iterative DFS)."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    order.reverse()
    return order


def _make(data, parents, backward):
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    _check_finite(out.data, "op output")
    return out


def _broadcast_kind(target, other):
    """Classify `other` against `target`: 'equal', 'channel', 'spatial' or None.

    Only the two attention patterns are allowed to broadcast: per-channel
    weights C×1×1×1 and per-voxel weights 1×D×H×W over a C×D×H×W map.
    """
    if other == target:
        return "equal"
    if len(target) == 4 and len(other) == 4:
        c, d, h, w = target
        if other == (c, 1, 1, 1):
            return "channel"
        if other == (1, d, h, w):
            return "spatial"
    return None


def _reduce_to(g, shape, kind):
    if kind == "equal":
        return g
    if kind == "channel":
        return np.sum(g, axis=(1, 2, 3), keepdims=True, dtype=np.float64)
    return np.sum(g, axis=0, keepdims=True, dtype=np.float64)  # spatial


def add(a, b):
    """Elementwise sum; `b` may be a Python scalar."""
    if not isinstance(b, Tensor):
        return _make(a.data + np.float32(b), [a], lambda g: (g,))
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    return _make(a.data + b.data, [a, b], lambda g: (g, g))


def mul_broadcast(a, b):
    """Elementwise product; broadcasting limited to the attention patterns."""
    if not isinstance(b, Tensor):
        s = np.float32(b)
        return _make(a.data * s, [a], lambda g: (g * s,))
    kind_b = _broadcast_kind(a.data.shape, b.data.shape)
    if kind_b is not None:
        out = a.data * b.data
        def backward(g):
            return (g * b.data, _reduce_to(g * a.data, b.data.shape, kind_b))
        return _make(out, [a, b], backward)
    kind_a = _broadcast_kind(b.data.shape, a.data.shape)
    if kind_a is not None:
        out = a.data * b.data
        def backward(g):
            return (_reduce_to(g * b.data, a.data.shape, kind_a), g * a.data)
        return _make(out, [a, b], backward)
    raise ShapeError(f"mul shapes not broadcastable: {a.data.shape} vs {b.data.shape}")


def div(a, b):
    """Division; the divisor must be a scalar Tensor or a Python scalar."""
    if not isinstance(b, Tensor):
        return mul_broadcast(a, 1.0 / float(b))
    if b.data.size != 1:
        raise ShapeError(f"div needs a scalar divisor, got shape {b.data.shape}")
    bv = float(b.data.reshape(()))
    out = a.data / np.float32(bv)
    def backward(g):
        ga = g / np.float32(bv)
        gb = np.asarray(
            -np.sum(g.astype(np.float64) * a.data) / (bv * bv), dtype=np.float32
        ).reshape(b.data.shape)
        return (ga, gb)
    return _make(out, [a, b], backward)


def relu(x):
    """max(0, x); subgradient at 0 is 0."""
    mask = x.data > 0
    return _make(np.where(mask, x.data, np.float32(0.0)), [x], lambda g: (g * mask,))


# smallest/largest float32 strictly inside (0, 1)
_SIGMOID_LO = np.float32(np.nextafter(np.float32(0), np.float32(1)))
_SIGMOID_HI = np.float32(1.0 - 2.0**-24)


def sigmoid(x):
    """Numerically stable logistic, clamped strictly inside (0, 1).

    Without the clamp float32 rounds saturated outputs to exactly 0 or 1,
    which kills the gradient exactly and freezes training permanently.
    """
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out[~pos] = ez / (1.0 + ez)
    np.clip(out, _SIGMOID_LO, _SIGMOID_HI, out=out)
    return _make(out, [x], lambda g: (g * out * (1.0 - out),))


def softmax_channels(x):
    """Per-voxel distribution over channel axis 0, max-stabilized."""
    if x.data.ndim != 4 or x.data.shape[0] < 2:
        raise ShapeError(f"softmax_channels needs C>=2 feature map, got {x.data.shape}")
    z = x.data.astype(np.float64)
    z -= z.max(axis=0, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=0, keepdims=True)
    out = s.astype(np.float32)
    def backward(g):
        gs = g.astype(np.float64) * s
        return ((gs - s * gs.sum(axis=0, keepdims=True)),)
    return _make(out, [x], backward)


def tensor_sum(x):
    """Sum of all elements as a scalar tensor (float64 accumulator)."""
    out = np.asarray(np.sum(x.data, dtype=np.float64), dtype=np.float32)
    return _make(out, [x], lambda g: (np.broadcast_to(g, x.data.shape),))


def global_avg_pool(x):
    """Spatial mean per channel: C×D×H×W -> C×1×1×1."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool needs C×D×H×W, got {x.data.shape}")
    c, d, h, w = x.data.shape
    n = d * h * w
    out = np.mean(x.data, axis=(1, 2, 3), keepdims=True, dtype=np.float64)
    def backward(g):
        return (np.broadcast_to(g / n, x.data.shape),)
    return _make(out.astype(np.float32), [x], backward)


def slice_channels(x, start, stop):
    """Channel sub-range of a feature map; gradient zero-pads back."""
    if x.data.ndim != 4:
        raise ShapeError(f"slice_channels needs C×D×H×W, got {x.data.shape}")
    c = x.data.shape[0]
    if not (0 <= start < stop <= c):
        raise ShapeError(f"channel range [{start}:{stop}] invalid for C={c}")
    out = x.data[start:stop].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return _make(out, [x], backward)


def concat_channels(inputs):
    """Stack feature maps along the channel axis; spatial extents must match."""
    if len(inputs) < 2:
        raise ShapeError("concat_channels needs at least two inputs")
    spatial = inputs[0].data.shape[1:]
    for t in inputs[1:]:
        if t.data.shape[1:] != spatial:
            raise ShapeError(
                f"concat spatial mismatch: {t.data.shape[1:]} vs {spatial}"
            )
    out = np.concatenate([t.data for t in inputs], axis=0)
    splits = np.cumsum([t.data.shape[0] for t in inputs])[:-1]
    def backward(g):
        return tuple(np.split(g, splits, axis=0))
    return _make(out, list(inputs), backward)


def _triple(v):
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ShapeError(f"expected 3 per-axis values, got {v!r}")
    return t


def conv3d(x, kernel, bias, stride=1, padding=0):
    """3D cross-correlation of a C×D×H×W map with an O×C×kd×kh×kw kernel.

    Differentiable w.r.t. input, kernel and bias. Contractions run in
    float64 via an im2col layout and are cast back to float32.
    """
    sd, sh, sw = _triple(stride)
    pd, ph, pw = _triple(padding)
    if x.data.ndim != 4:
        raise ShapeError(f"conv3d input must be C×D×H×W, got {x.data.shape}")
    if kernel.data.ndim != 5:
        raise ShapeError(f"conv3d kernel must be O×C×kd×kh×kw, got {kernel.data.shape}")
    o, ci, kd, kh, kw = kernel.data.shape
    if x.data.shape[0] != ci:
        raise ShapeError(
            f"conv3d channel mismatch: input has {x.data.shape[0]}, kernel expects {ci}"
        )
    if bias.data.shape != (o,):
        raise ShapeError(f"conv3d bias must have shape ({o},), got {bias.data.shape}")
    if min(sd, sh, sw) < 1 or min(pd, ph, pw) < 0:
        raise ShapeError("conv3d stride must be >=1 and padding >=0")

    d, h, w = x.data.shape[1:]
    do = (d + 2 * pd - kd) // sd + 1
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if min(do, ho, wo) < 1:
        raise ShapeError(
            f"conv3d output extents non-positive: input {x.data.shape}, "
            f"kernel {(kd, kh, kw)}, stride {(sd, sh, sw)}, padding {(pd, ph, pw)}"
        )

    xp = np.pad(
        x.data.astype(np.float64),
        ((0, 0), (pd, pd), (ph, ph), (pw, pw)),
    )
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kd, kh, kw), axis=(1, 2, 3))
    windows = windows[:, ::sd, ::sh, ::sw]  # C×Do×Ho×Wo×kd×kh×kw
    k64 = kernel.data.astype(np.float64)
    out = np.tensordot(k64, windows, axes=([1, 2, 3, 4], [0, 4, 5, 6]))
    out += bias.data.astype(np.float64).reshape(o, 1, 1, 1)

    def backward(g):
        g64 = g.astype(np.float64)
        gk = np.tensordot(g64, windows, axes=([1, 2, 3], [1, 2, 3]))
        gb = g64.sum(axis=(1, 2, 3))
        gxp = np.zeros_like(xp)
        # scatter-add one kernel offset at a time; overlaps forbid a pure view
        for i in range(kd):
            for j in range(kh):
                for k in range(kw):
                    t = np.tensordot(k64[:, :, i, j, k], g64, axes=([0], [0]))
                    gxp[
                        :,
                        i : i + sd * do : sd,
                        j : j + sh * ho : sh,
                        k : k + sw * wo : sw,
                    ] += t
        gx = gxp[:, pd : pd + d, ph : ph + h, pw : pw + w]
        return (gx, gk, gb)

    return _make(out.astype(np.float32), [x, kernel, bias], backward)


def max_pool3d(x, factor=2):
    """Non-overlapping max pooling; spatial extents must divide by `factor`."""
    f = int(factor)
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool3d needs C×D×H×W, got {x.data.shape}")
    c, d, h, w = x.data.shape
    if d % f or h % f or w % f:
        raise ShapeError(f"max_pool3d extents {x.data.shape[1:]} not divisible by {f}")
    blocks = (
        x.data.reshape(c, d // f, f, h // f, f, w // f, f)
        .transpose(0, 1, 3, 5, 2, 4, 6)
        .reshape(c, d // f, h // f, w // f, f * f * f)
    )
    idx = np.argmax(blocks, axis=-1)  # ties route to the first maximum
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = (
            gb.reshape(c, d // f, h // f, w // f, f, f, f)
            .transpose(0, 1, 4, 2, 5, 3, 6)
            .reshape(c, d, h, w)
        )
        return (gx,)

    return _make(out, [x], backward)


def nearest_upsample(x, factor=2):
    """Nearest-neighbor upsampling by an integer factor per spatial axis."""
    f = int(factor)
    if x.data.ndim != 4:
        raise ShapeError(f"nearest_upsample needs C×D×H×W, got {x.data.shape}")
    c, d, h, w = x.data.shape
    out = np.repeat(np.repeat(np.repeat(x.data, f, axis=1), f, axis=2), f, axis=3)

    def backward(g):
        gx = g.astype(np.float64).reshape(c, d, f, h, f, w, f).sum(axis=(2, 4, 6))
        return (gx,)

    return _make(out, [x], backward)


def grad_check(f, x, step=1e-3):
    """Max relative error between analytic and central-difference gradients.

    `f` must map `x` to a scalar Tensor. Every coordinate of `x` is probed,
    so keep inputs small. The error is relative for gradient entries above 1
    in magnitude and absolute below, which keeps float32 forward rounding
    from swamping near-zero entries.
    """
    x.zero_grad()
    needed_grad = x.requires_grad
    x.requires_grad = True
    f(x).backward()
    analytic = x.grad.astype(np.float64).reshape(-1).copy()
    x.requires_grad = needed_grad
    x.zero_grad()

    numeric = np.zeros_like(analytic)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f(x).item()
        flat[i] = orig - step
        down = f(x).item()
        flat[i] = orig
        numeric[i] = (up - down) / (2.0 * step)
    return max_rel_err(analytic, numeric)


def max_rel_err(a, b):
    """Elementwise max of |a-b| / max(|a|, |b|, 1)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)
    return float(np.max(np.abs(a - b) / denom))
