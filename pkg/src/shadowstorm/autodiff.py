"""Reverse-mode differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array and records the operations that
produced it; calling :meth:`Tensor.backward` on a scalar result walks the
tape in reverse topological order and accumulates exact vector-Jacobian
products into every reachable tensor with ``requires_grad``.

The primitive set is deliberately small: element-wise arithmetic, relu,
clamp, sqrt, 2-D convolution (stride 1, zero-padded to same size), average
pooling, depthwise blur with a fixed kernel, reductions and norms. Images
and feature maps are (height, width, channels) arrays; scalars are 0-d.

Gradient conventions (documented because they matter for attacks):
  * the l2 norm has gradient 0 at the origin (a valid subgradient);
  * clamp is straight-through strictly inside its bounds, 0 at and beyond;
  * relu's gradient at exactly 0 is 0;
  * sqrt's gradient at exactly 0 is defined as 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class ShapeMismatchError(ValueError):
    pass


def _shape_check(op: str, a: np.ndarray, b: np.ndarray) -> None:
    """Allow equal shapes or numpy-broadcastable ones (scalars, size-1 axes)."""
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(
            f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward",
                 "_backward_done")

    def __init__(self, data, requires_grad: bool = False, _parents=(),
                 _backward: Callable[[], None] | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor.

        Without `seed` this tensor must be scalar (the loss) and is seeded
        with 1.0. With `seed` (an array matching this tensor's shape) the
        call computes the corresponding vector-Jacobian product instead.
        A tape can only be walked once; build a fresh graph to re-derive.
        """
        if self._backward_done:
            raise RuntimeError("backward called twice on the same tape; "
                               "rebuild the graph to differentiate again")
        if seed is None:
            if self.data.size != 1:
                raise ValueError(
                    f"backward without a seed requires a scalar, got shape "
                    f"{self.data.shape}")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != self.data.shape:
                raise ShapeMismatchError(
                    f"backward seed shape {seed.shape} does not match tensor "
                    f"shape {self.data.shape}")
        self._backward_done = True

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self._accumulate(seed)
        for node in reversed(topo):
            # a node can receive no contribution at all when every path to it
            # chose a zero subgradient (e.g. the l2 norm at the origin)
            if node._backward is not None and node.grad is not None:
                node._backward()
        for node in topo:
            if node.requires_grad and node.grad is None:
                node.grad = np.zeros_like(node.data)

    # operator sugar over the module-level primitives
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __neg__(self):
        return smul(self, -1.0)


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: tuple[Tensor, ...],
          backward_builder) -> Tensor:
    """Create an op output; records the tape only if some parent needs grad."""
    requires = any(p.requires_grad for p in parents)
    if not requires:
        return Tensor(data)
    out = Tensor(data, requires_grad=True, _parents=parents)
    out._backward = backward_builder(out)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    _shape_check("add", a.data, b.data)
    data = a.data + b.data

    def build(out):
        def back():
            if a.requires_grad:
                a._accumulate(_unbroadcast(out.grad, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(out.grad, b.data.shape))
        return back
    return _make(data, (a, b), build)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _shape_check("sub", a.data, b.data)
    data = a.data - b.data

    def build(out):
        def back():
            if a.requires_grad:
                a._accumulate(_unbroadcast(out.grad, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-out.grad, b.data.shape))
        return back
    return _make(data, (a, b), build)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _shape_check("mul", a.data, b.data)
    data = a.data * b.data

    def build(out):
        def back():
            if a.requires_grad:
                a._accumulate(_unbroadcast(out.grad * b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(out.grad * a.data, b.data.shape))
        return back
    return _make(data, (a, b), build)


def div(a: Tensor, b: Tensor) -> Tensor:
    _shape_check("div", a.data, b.data)
    data = a.data / b.data

    def build(out):
        def back():
            if a.requires_grad:
                a._accumulate(_unbroadcast(out.grad / b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(
                    -out.grad * a.data / (b.data * b.data), b.data.shape))
        return back
    return _make(data, (a, b), build)


def smul(a: Tensor, scalar: float) -> Tensor:
    data = a.data * scalar

    def build(out):
        def back():
            if a.requires_grad:
                a._accumulate(out.grad * scalar)
        return back
    return _make(data, (a,), build)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def build(out):
        def back():
            if a.requires_grad:
                a._accumulate(out.grad * (a.data > 0.0))
        return back
    return _make(data, (a,), build)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only strictly inside the bounds."""
    data = np.clip(a.data, lo, hi)

    def build(out):
        def back():
            if a.requires_grad:
                inside = (a.data > lo) & (a.data < hi)
                a._accumulate(out.grad * inside)
        return back
    return _make(data, (a,), build)


def clamp01(a: Tensor) -> Tensor:
    return clamp(a, 0.0, 1.0)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0.0):
        raise ValueError("sqrt: negative input")
    data = np.sqrt(a.data)

    def build(out):
        def back():
            if a.requires_grad:
                g = np.where(a.data > 0.0, 0.5 / np.maximum(data, 1e-300), 0.0)
                a._accumulate(out.grad * g)
        return back
    return _make(data, (a,), build)


def tsum(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum())

    def build(out):
        def back():
            if a.requires_grad:
                a._accumulate(np.broadcast_to(out.grad, a.data.shape).copy())
        return back
    return _make(data, (a,), build)


def mean_channels(a: Tensor) -> Tensor:
    """(H, W, C) -> (H, W, 1) average over the channel axis."""
    if a.data.ndim != 3:
        raise ShapeMismatchError(
            f"mean_channels: expected HxWxC input, got shape {a.data.shape}")
    channels = a.data.shape[2]
    data = a.data.mean(axis=2, keepdims=True)

    def build(out):
        def back():
            if a.requires_grad:
                a._accumulate(np.broadcast_to(
                    out.grad / channels, a.data.shape).copy())
        return back
    return _make(data, (a,), build)


def sqnorm(a: Tensor) -> Tensor:
    """Squared l2 norm over all entries (scalar output)."""
    data = np.asarray(np.sum(a.data * a.data))

    def build(out):
        def back():
            if a.requires_grad:
                a._accumulate(out.grad * 2.0 * a.data)
        return back
    return _make(data, (a,), build)


def l2norm(a: Tensor) -> Tensor:
    """l2 norm over all entries; gradient at the origin is the zero vector."""
    norm = float(np.sqrt(np.sum(a.data * a.data)))
    data = np.asarray(norm)

    def build(out):
        def back():
            if a.requires_grad:
                if norm > 0.0:
                    a._accumulate(out.grad * (a.data / norm))
                # at the origin the chosen subgradient is 0: accumulate nothing
        return back
    return _make(data, (a,), build)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Spatial convolution (cross-correlation), stride 1, zero padding to
    same size. x: (H, W, Cin); kernel: (kh, kw, Cin, Cout); bias: (Cout,)."""
    xd, kd = x.data, kernel.data
    if xd.ndim != 3 or kd.ndim != 4 or xd.shape[2] != kd.shape[2]:
        raise ShapeMismatchError(
            f"conv2d: incompatible shapes {xd.shape} and {kd.shape}")
    kh, kw = kd.shape[0], kd.shape[1]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeMismatchError(
            f"conv2d: kernel dims must be odd for same padding, got {kd.shape}")
    h, w = xd.shape[0], xd.shape[1]
    cout = kd.shape[3]
    if bias is not None and bias.data.shape != (cout,):
        raise ShapeMismatchError(
            f"conv2d: bias shape {bias.data.shape} does not match {cout} outputs")

    padded = np.zeros((h + kh - 1, w + kw - 1, xd.shape[2]))
    ph, pw = kh // 2, kw // 2
    padded[ph:ph + h, pw:pw + w] = xd
    data = np.zeros((h, w, cout))
    for i in range(kh):
        for j in range(kw):
            data += np.tensordot(padded[i:i + h, j:j + w], kd[i, j],
                                 axes=([2], [0]))
    if bias is not None:
        data += bias.data

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def build(out):
        def back():
            g = out.grad
            if x.requires_grad:
                gpad = np.zeros_like(padded)
                for i in range(kh):
                    for j in range(kw):
                        gpad[i:i + h, j:j + w] += np.tensordot(
                            g, kd[i, j], axes=([2], [1]))
                x._accumulate(gpad[ph:ph + h, pw:pw + w])
            if kernel.requires_grad:
                gk = np.empty_like(kd)
                for i in range(kh):
                    for j in range(kw):
                        gk[i, j] = np.tensordot(padded[i:i + h, j:j + w], g,
                                                axes=([0, 1], [0, 1]))
                kernel._accumulate(gk)
            if bias is not None and bias.requires_grad:
                bias._accumulate(g.sum(axis=(0, 1)))
        return back
    return _make(data, parents, build)


def avgpool2d(x: Tensor, size: int) -> Tensor:
    """Non-overlapping average pooling; H and W must be divisible by size."""
    xd = x.data
    if xd.ndim != 3:
        raise ShapeMismatchError(
            f"avgpool2d: expected HxWxC input, got shape {xd.shape}")
    h, w, c = xd.shape
    if h % size or w % size:
        raise ShapeMismatchError(
            f"avgpool2d: {h}x{w} not divisible by pool size {size}")
    data = xd.reshape(h // size, size, w // size, size, c).mean(axis=(1, 3))

    def build(out):
        def back():
            if x.requires_grad:
                g = out.grad / (size * size)
                x._accumulate(np.repeat(np.repeat(g, size, axis=0),
                                        size, axis=1))
        return back
    return _make(data, (x,), build)


def blur2d(x: Tensor, kernel2d: np.ndarray) -> Tensor:
    """Depthwise blur with a fixed 2-D kernel (not differentiated), zero
    padding to same size. Used for box/Gaussian smoothing inside models."""
    xd = x.data
    kern = np.asarray(kernel2d, dtype=np.float64)
    if xd.ndim != 3 or kern.ndim != 2:
        raise ShapeMismatchError(
            f"blur2d: incompatible shapes {xd.shape} and {kern.shape}")
    kh, kw = kern.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeMismatchError(
            f"blur2d: kernel dims must be odd for same padding, got {kern.shape}")
    h, w, c = xd.shape
    ph, pw = kh // 2, kw // 2
    padded = np.zeros((h + kh - 1, w + kw - 1, c))
    padded[ph:ph + h, pw:pw + w] = xd
    data = np.zeros_like(xd)
    for i in range(kh):
        for j in range(kw):
            data += kern[i, j] * padded[i:i + h, j:j + w]

    def build(out):
        def back():
            if x.requires_grad:
                gpad = np.zeros_like(padded)
                g = out.grad
                for i in range(kh):
                    for j in range(kw):
                        gpad[i:i + h, j:j + w] += kern[i, j] * g
                x._accumulate(gpad[ph:ph + h, pw:pw + w])
        return back
    return _make(data, (x,), build)


def box_kernel(radius: int) -> np.ndarray:
    """(2r+1) x (2r+1) averaging kernel."""
    size = 2 * radius + 1
    return np.full((size, size), 1.0 / (size * size))


def gaussian_kernel(radius: int, sigma: float) -> np.ndarray:
    """Truncated Gaussian kernel on a (2r+1)^2 support, renormalized to sum 1."""
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(offsets ** 2) / (2.0 * sigma * sigma))
    kern = np.outer(g, g)
    return kern / kern.sum()


@dataclass(frozen=True)
class GradCheckReport:
    """Outcome of an analytic-vs-central-difference gradient comparison.

    Relative error is measured against the larger of the two gradients'
    max-norms, so coordinates where both gradients vanish do not blow up
    the ratio. Coordinates where the displacement sweeps across a kink of
    a relu/clamp are excluded (central differences are only a gradient
    oracle at locally smooth points) and counted in nonsmooth_count.
    """
    max_rel_error: float
    worst_coord: tuple[int, ...]
    scale: float
    tolerance: float
    passed: bool
    checked_count: int
    nonsmooth_count: int


def grad_check(f: Callable[[Tensor], Tensor], x: np.ndarray,
               h: float = 1e-4, tol: float = 1e-4) -> GradCheckReport:
    """Compare f's analytic input gradient against central differences.

    f maps a Tensor to a scalar Tensor and must be deterministic. Each
    coordinate of x is displaced by +/-h and +/-h/2 for two central
    estimates plus the corresponding one-sided slopes. Central differences
    are a gradient oracle only where f is locally C^1, so kink-crossing
    coordinates are excluded rather than reported as gradient defects;
    they are recognized by either h-independent signature: the two central
    estimates disagree, or the one-sided slope gap fails to halve under
    step halving the way smooth curvature (gap ~ h * f'') must. On the
    remaining coordinates the h-step estimate has to match the analytic
    gradient within tol of the gradient scale.
    """
    x = np.asarray(x, dtype=np.float64)
    leaf = Tensor(x.copy(), requires_grad=True)
    out = f(leaf)
    out.backward()
    analytic = leaf.grad.copy() if leaf.grad is not None else np.zeros_like(x)

    def scalar_at(values: np.ndarray) -> float:
        return float(f(Tensor(values)).data)

    f0 = scalar_at(x)
    numeric = np.empty_like(x)
    numeric_half = np.empty_like(x)
    onesided_gap = np.empty_like(x)       # |d+ - d-| at step h
    onesided_gap_half = np.empty_like(x)  # |d+ - d-| at step h/2
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        for step, central, gap in ((h, numeric, onesided_gap),
                                   (h / 2.0, numeric_half, onesided_gap_half)):
            xp[idx] = x[idx] + step
            xm[idx] = x[idx] - step
            fp, fm = scalar_at(xp), scalar_at(xm)
            central[idx] = (fp - fm) / (2.0 * step)
            gap[idx] = abs((fp - f0) / step - (f0 - fm) / step)

    scale = max(float(np.max(np.abs(analytic))),
                float(np.max(np.abs(numeric))), 1e-12)
    # two kink detectors, both with h-independent signatures:
    #  * the two central estimates disagree (kink between the half and full
    #    windows), or
    #  * the one-sided slopes disagree and that gap does not shrink with the
    #    step as smooth curvature would (gap ~ h * f'' halves; a slope jump
    #    across a kink stays put)
    central_disagree = np.abs(numeric - numeric_half) > tol * scale
    jump_like = ((onesided_gap > tol * scale)
                 & (onesided_gap < 1.5 * onesided_gap_half))
    smooth = ~(central_disagree | jump_like)
    rel = np.where(smooth, np.abs(analytic - numeric) / scale, 0.0)
    if rel.size and smooth.any():
        worst = np.unravel_index(int(np.argmax(rel)), rel.shape)
        max_rel = float(rel.max())
    else:
        worst, max_rel = (), 0.0
    return GradCheckReport(max_rel_error=max_rel, worst_coord=tuple(worst),
                           scale=scale, tolerance=tol, passed=max_rel < tol,
                           checked_count=int(smooth.sum()),
                           nonsmooth_count=int((~smooth).sum()))
