"""Minimal reverse-mode differentiable tensor engine.

Tensors wrap dense numpy buffers (NCHW order for feature maps) and record a
backward closure per operation. Calling ``backward()`` on a scalar output
walks the graph in reverse topological order and accumulates gradients into
``Tensor.grad`` buffers.

The engine is deliberately small: it supplies exactly the ops the detection
graph needs (convolution, ReLU, 2x2 max pooling, 2x bilinear upsampling,
channel concat/slice, anchor-row reshuffles, the two loss reductions and
scalar arithmetic) plus SGD with momentum, xavier initialization and a
finite-difference gradient checker.

Training runs in float32; gradient checks build the graph in float64, where
the central-difference tolerance of 1e-4 is actually attainable.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError

DEFAULT_DTYPE = np.float32

# When enabled, every op asserts its output is finite. Costs a full pass over
# each result, so tests turn it on and training leaves it off.
_finite_checks = False


def set_finite_checks(enabled: bool) -> None:
    global _finite_checks
    _finite_checks = bool(enabled)


def _check_finite(name: str, data: np.ndarray) -> None:
    if _finite_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{name}: non-finite values in output")


class Tensor:
    """Dense N-dimensional array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar output through the recorded graph."""
        if self.data.size != 1:
            raise ConfigurationError(
                f"backward: output must be scalar, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Parameter:
    """Named trainable tensor plus its SGD momentum buffer."""

    __slots__ = ("name", "tensor", "momentum_buffer")

    def __init__(self, name: str, tensor: Tensor):
        tensor.requires_grad = True
        self.name = name
        self.tensor = tensor
        self.momentum_buffer = np.zeros_like(tensor.data)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, name: str) -> Tensor:
    _check_finite(name, data)
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# convolution


def _pad_pair(pad) -> tuple[int, int]:
    if isinstance(pad, tuple):
        return pad
    return (int(pad), int(pad))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Gather sliding-window patches into a (N*oh*ow, C*kh*kw) matrix."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, oh, ow, c, kh, kw),
        strides=(sn, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )
    return view.reshape(n * oh * ow, c * kh * kw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1,
           pad=0, name: str = "conv2d") -> Tensor:
    """Cross-correlate NCHW input with OCkk weights.

    ``pad`` may be an int or an (h, w) pair; (0, 1) gives same-size output for
    a 1x3 kernel. Kernel sides are restricted to {1, 3}.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ConfigurationError(f"{name}: expected 4-d input and weight, got "
                                 f"{x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if kh not in (1, 3) or kw not in (1, 3):
        raise ConfigurationError(f"{name}: kernel sides must be 1 or 3, got {kh}x{kw}")
    if cw != c:
        raise ConfigurationError(
            f"{name}: weight expects {cw} input channels, input has {c}")
    ph, pw = _pad_pair(pad)
    if (h + 2 * ph - kh) % stride or (w + 2 * pw - kw) % stride:
        raise ConfigurationError(
            f"{name}: output size not integral for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {stride}, pad ({ph},{pw})")
    oh = (h + 2 * ph - kh) // stride + 1
    ow = (w + 2 * pw - kw) // stride + 1
    if bias is not None and bias.shape != (o,):
        raise ConfigurationError(f"{name}: bias shape {bias.shape} != ({o},)")

    if ph or pw:
        xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    else:
        xp = x.data
    cols = np.ascontiguousarray(_im2col(xp, kh, kw, stride, oh, ow))
    wmat = weight.data.reshape(o, c * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g: np.ndarray) -> None:
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, o)
        if weight.requires_grad:
            weight._accumulate((gmat.T @ cols).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(gmat.sum(axis=0))
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, oh, ow, c, kh, kw)
            gxp = np.zeros_like(xp)
            hi = (oh - 1) * stride + 1
            wi = (ow - 1) * stride + 1
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + hi:stride, j:j + wi:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if ph or pw:
                gxp = gxp[:, :, ph:ph + h, pw:pw + w]
            x._accumulate(gxp)

    return _result(out, parents, backward, name)


def conv2d_naive(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None,
                 stride: int = 1, pad=0) -> np.ndarray:
    """Loop-based convolution fallback, kept as the correctness oracle for the
    im2col path. Orders of magnitude slower; never used in training."""
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    ph, pw = _pad_pair(pad)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    oh = (h + 2 * ph - kh) // stride + 1
    ow = (w + 2 * pw - kw) // stride + 1
    out = np.zeros((n, o, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for oi in range(o):
            for yi in range(oh):
                for xi in range(ow):
                    patch = xp[ni, :, yi * stride:yi * stride + kh,
                               xi * stride:xi * stride + kw]
                    out[ni, oi, yi, xi] = np.sum(patch * weight[oi])
            if bias is not None:
                out[ni, oi] += bias[oi]
    return out


# ---------------------------------------------------------------------------
# activations / pooling / resampling


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    mask = x.data > 0  # gradient at exactly zero is defined as zero

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(g * mask)

    return _result(out, (x,), backward, "relu")


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; ties route gradient to the first cell in
    row-major window order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigurationError(f"maxpool2x2: H and W must be even, got {h}x{w}")
    oh, ow = h // 2, w // 2
    windows = x.data.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(n, c, oh, ow, 4)
    argmax = windows.argmax(axis=-1)  # first max wins
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            gw = np.zeros((n, c, oh, ow, 4), dtype=g.dtype)
            np.put_along_axis(gw, argmax[..., None], g[..., None], axis=-1)
            gx = gw.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
            x._accumulate(gx.reshape(n, c, h, w))

    return _result(out, (x,), backward, "maxpool2x2")


_upsample_matrices: dict[tuple[int, str], np.ndarray] = {}


def _upsample_matrix(size: int, dtype) -> np.ndarray:
    """Dense (2*size, size) bilinear interpolation matrix, align-corners=false."""
    key = (size, np.dtype(dtype).name)
    m = _upsample_matrices.get(key)
    if m is None:
        m = np.zeros((2 * size, size), dtype=dtype)
        for i in range(2 * size):
            src = (i + 0.5) / 2.0 - 0.5
            lo = math.floor(src)
            t = src - lo
            m[i, min(max(lo, 0), size - 1)] += 1.0 - t
            m[i, min(max(lo + 1, 0), size - 1)] += t
        _upsample_matrices[key] = m
    return m


def bilinear_upsample2x(x: Tensor) -> Tensor:
    """2x bilinear upsampling (align-corners=false). Linear, so the backward
    pass is the transpose of the forward interpolation."""
    n, c, h, w = x.shape
    mh = _upsample_matrix(h, x.dtype)
    mw = _upsample_matrix(w, x.dtype)
    flat = x.data.reshape(n * c, h, w)
    out = np.matmul(np.matmul(mh, flat), mw.T).reshape(n, c, 2 * h, 2 * w)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            gflat = g.reshape(n * c, 2 * h, 2 * w)
            gx = np.matmul(np.matmul(mh.T, gflat), mw)
            x._accumulate(gx.reshape(n, c, h, w))

    return _result(out, (x,), backward, "bilinear_upsample2x")


# ---------------------------------------------------------------------------
# shape plumbing


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ConfigurationError("concat_channels: expected NCHW tensors")
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if na != nb or ha != hb or wa != wb:
        raise ConfigurationError(
            f"concat_channels: spatial mismatch {a.shape} vs {b.shape}; "
            "upsample the smaller map first")
    out = np.concatenate([a.data, b.data], axis=1)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g[:, :ca])
        if b.requires_grad:
            b._accumulate(g[:, ca:])

    return _result(out, (a, b), backward, "concat_channels")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    out = np.ascontiguousarray(x.data[:, start:stop])

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[:, start:stop] = g
            x._accumulate(gx)

    return _result(out, (x,), backward, "slice_channels")


def cells_to_rows(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, H*W, C] with cells in row-major order, matching the
    anchor grid layout."""
    n, c, h, w = x.shape
    out = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(n, h * w, c)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(g.reshape(n, h, w, c).transpose(0, 3, 1, 2))

    return _result(out, (x,), backward, "cells_to_rows")


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate [N, A_i, C] tensors along the row axis."""
    sizes = [t.shape[1] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=1)
    offsets = np.cumsum([0] + sizes)

    def backward(g: np.ndarray) -> None:
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t._accumulate(g[:, lo:hi])

    return _result(out, tuple(tensors), backward, "concat_rows")


def select_rows(x: Tensor, image_idx: np.ndarray, row_idx: np.ndarray) -> Tensor:
    """Gather rows (image, anchor) from an [N, A, C] tensor into [K, C]."""
    out = np.ascontiguousarray(x.data[image_idx, row_idx])

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, (image_idx, row_idx), g)
            x._accumulate(gx)

    return _result(out, (x,), backward, "select_rows")


# ---------------------------------------------------------------------------
# arithmetic and reductions


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ConfigurationError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _result(out, (a, b), backward, "add")


def scale(x: Tensor, factor: float) -> Tensor:
    out = x.data * x.dtype.type(factor)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(g * x.dtype.type(factor))

    return _result(out, (x,), backward, "scale")


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=x.dtype))

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(np.broadcast_to(g, x.shape).astype(x.dtype))

    return _result(out, (x,), backward, "sum_all")


def softmax_cross_entropy_sum(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Sum over rows of -log softmax(logits)[label]. ``labels`` are fixed
    integer class ids, not graph inputs."""
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    denom = ez.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(denom)
    rows = np.arange(z.shape[0])
    out = np.asarray(-logp[rows, labels].sum(dtype=z.dtype))
    softmax = ez / denom

    def backward(g: np.ndarray) -> None:
        if logits.requires_grad:
            gz = softmax.copy()
            gz[rows, labels] -= 1.0
            logits._accumulate(gz * g)

    return _result(out, (logits,), backward, "softmax_cross_entropy_sum")


def smooth_l1_sum(pred: Tensor, target: np.ndarray) -> Tensor:
    """Sum of elementwise huber(d) with d = pred - target: 0.5*d^2 for |d|<1,
    |d|-0.5 otherwise. ``target`` is a fixed array, not a graph input."""
    d = pred.data - target
    absd = np.abs(d)
    quad = absd < 1.0
    vals = np.where(quad, 0.5 * d * d, absd - 0.5)
    out = np.asarray(vals.sum(dtype=pred.dtype))

    def backward(g: np.ndarray) -> None:
        if pred.requires_grad:
            pred._accumulate(np.clip(d, -1.0, 1.0) * g)

    return _result(out, (pred,), backward, "smooth_l1_sum")


# ---------------------------------------------------------------------------
# initialization and optimization


def xavier_init(shape: Sequence[int], rng_seed) -> Tensor:
    """Uniform initialization on +-sqrt(6 / (fan_in + fan_out)).

    ``rng_seed`` is an int seed or a numpy Generator; passing a Generator lets
    a model draw all its parameters from one deterministic stream.
    """
    shape = tuple(int(s) for s in shape)
    if not shape:
        raise ConfigurationError("xavier_init: shape must be nonempty")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) \
        else np.random.default_rng(rng_seed)
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_out = shape[0] * receptive
    fan_in = (shape[1] if len(shape) > 1 else shape[0]) * receptive
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    data = rng.uniform(-bound, bound, size=shape).astype(DEFAULT_DTYPE)
    return Tensor(data)


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0) -> None:
    """v <- momentum*v + grad + weight_decay*w; w <- w - lr*v; grads cleared."""
    for p in params:
        g = p.tensor.grad
        if g is None:
            raise ConfigurationError(f"sgd_step: parameter {p.name!r} has no gradient")
        v = p.momentum_buffer
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p.tensor.data
        p.tensor.data -= p.tensor.dtype.type(lr) * v
        p.tensor.grad = None


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.tensor.grad = None


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(build_graph: Callable[[], Tensor], param: Parameter,
               step: float = 1e-4, exclude: np.ndarray | None = None,
               kink_filter: bool = False) -> float:
    """Compare the analytic gradient of a scalar graph against central finite
    differences, elementwise, returning the max relative error.

    ``build_graph`` re-executes the forward pass (finite differences need the
    function, not just one evaluation). The graph should be built in float64;
    float32 cannot reach the 1e-4 tolerance.

    Non-differentiable point policy: ``exclude`` masks entries known to sit on
    a kink (e.g. relu inputs at exactly zero). ``kink_filter`` detects them
    automatically by re-estimating each difference at half the step size; on
    smooth entries the two estimates agree to O(step^2), while a kink inside
    the probe interval makes them disagree grossly, so inconsistent entries
    are excluded. The filter never consults the analytic gradient, keeping
    the numeric side an independent oracle.
    """
    out = build_graph()
    if out.data.size != 1:
        raise ConfigurationError(
            f"grad_check: graph output must be scalar, got shape {out.shape}")
    param.tensor.grad = None
    out.backward()
    analytic = param.tensor.grad
    if analytic is None:
        analytic = np.zeros_like(param.tensor.data)
    analytic = analytic.copy()
    param.tensor.grad = None

    def central(i: int, h: float, flat: np.ndarray) -> float:
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(build_graph().data)
        flat[i] = orig - h
        f_minus = float(build_graph().data)
        flat[i] = orig
        return (f_plus - f_minus) / (2.0 * h)

    flat = param.tensor.data.reshape(-1)
    numeric = np.zeros_like(flat)
    kinked = np.zeros(flat.size, dtype=bool)
    for i in range(flat.size):
        numeric[i] = central(i, step, flat)
        if kink_filter:
            half = central(i, step / 2.0, flat)
            scale_ = max(abs(numeric[i]), abs(half), 1e-8)
            kinked[i] = abs(numeric[i] - half) / scale_ > 1e-3
    numeric = numeric.reshape(param.tensor.data.shape)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    # treat near-zero pairs as exact; relative error is meaningless there
    rel[np.maximum(np.abs(analytic), np.abs(numeric)) < 1e-10] = 0.0
    if kink_filter:
        rel[kinked.reshape(rel.shape)] = 0.0
    if exclude is not None:
        rel[exclude] = 0.0
    return float(rel.max()) if rel.size else 0.0
