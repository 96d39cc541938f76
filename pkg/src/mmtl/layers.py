"""Neural-network primitives on top of the autodiff core.

Convolution and transposed convolution are built from a mutually adjoint
gather/scatter pair plus matmul, so the transpose is the exact adjoint of
the convolution with the same kernel and every layer is differentiable to
arbitrary order.

Conventions (documented so checkpoints are portable):
  - images are NCHW;
  - conv weights are (out_channels, in_channels, kh, kw);
  - conv-transpose weights are (in_channels, out_channels, kh, kw), i.e.
    the same array the adjoint convolution would use;
  - linear layers compute batch-rows times weight-matrix: (n, d_in) @
    (d_in, d_out) + bias.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mmtl.tensor import (
    ShapeError,
    Tensor,
    _lift,
    broadcast_to,
    concat,
    gather_flat,
    getitem,
    matmul,
    mul,
    pad2d,
    reshape,
    scatter_flat,
    sigmoid,
    softplus,
    sub,
    tanh,
    texp,
    tlog,
    tmean,
    transpose,
    tsqrt,
    tsum,
)
import mmtl.tensor as T


@dataclass(frozen=True)
class Conv2dSpec:
    """Static configuration of one convolution layer."""

    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    padding: int = 0

    def out_extent(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        oh = (h + 2 * self.padding - kh) // self.stride + 1
        ow = (w + 2 * self.padding - kw) // self.stride + 1
        return oh, ow


_IM2COL_CACHE: dict[tuple, np.ndarray] = {}


def _im2col_index(n: int, c: int, hp: int, wp: int, kh: int, kw: int,
                  stride: int) -> np.ndarray:
    """Flat indices into an (n, c, hp, wp) tensor laid out as patches.

    Result shape: (n, oh*ow, c*kh*kw).
    """
    key = (n, c, hp, wp, kh, kw, stride)
    idx = _IM2COL_CACHE.get(key)
    if idx is not None:
        return idx
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    # per-channel/kernel offsets within one sample
    ci = np.arange(c).reshape(c, 1, 1)
    dh = np.arange(kh).reshape(1, kh, 1)
    dw = np.arange(kw).reshape(1, 1, kw)
    inner = (ci * hp + dh) * wp + dw  # (c, kh, kw)
    oy = (np.arange(oh) * stride).reshape(oh, 1, 1)
    ox = (np.arange(ow) * stride).reshape(1, ow, 1)
    pos = (oy * wp + ox).reshape(oh * ow, 1)  # (oh*ow, 1)
    patch = inner.reshape(1, c * kh * kw) + pos  # (oh*ow, c*kh*kw)
    base = (np.arange(n) * (c * hp * wp)).reshape(n, 1, 1)
    idx = (patch[None, :, :] + base).astype(np.int64)
    _IM2COL_CACHE[key] = idx
    return idx


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1,
           pad: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with (out, in, kh, kw) weights."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d input/weights, got {x.shape}, {w.shape}")
    n, ci, h, wd = x.shape
    co, ci_w, kh, kw = w.shape
    if ci != ci_w:
        raise ShapeError(
            f"conv2d: input has {ci} channels but weights expect {ci_w}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv2d: invalid output extent {oh}x{ow} for input {h}x{wd}, "
            f"kernel {kh}x{kw}, stride {stride}, pad {pad}")
    xp = pad2d(x, pad, pad)
    idx = _im2col_index(n, ci, h + 2 * pad, wd + 2 * pad, kh, kw, stride)
    cols = gather_flat(xp, idx, (n * oh * ow, ci * kh * kw))
    wmat = reshape(w, (co, ci * kh * kw))
    out = matmul(cols, transpose(wmat, None))  # (n*oh*ow, co)
    out = transpose(reshape(out, (n, oh, ow, co)), (0, 3, 1, 2))
    if b is not None:
        if b.shape != (co,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({co},)")
        out = out + reshape(b, (1, co, 1, 1))
    return out


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1,
                     pad: int = 0) -> Tensor:
    """Adjoint of conv2d with the same kernel: (in, out, kh, kw) weights.

    With kernel 2, stride 2 and no padding the spatial extent exactly
    doubles. The inner product identity <conv_transpose(x), y> ==
    <x, conv2d(y)> holds by construction.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(
            f"conv_transpose2d: need 4-d input/weights, got {x.shape}, {w.shape}")
    n, ci, h, wd = x.shape
    ci_w, co, kh, kw = w.shape
    if ci != ci_w:
        raise ShapeError(
            f"conv_transpose2d: input has {ci} channels but weights expect {ci_w}")
    h_out = (h - 1) * stride - 2 * pad + kh
    w_out = (wd - 1) * stride - 2 * pad + kw
    if h_out < 1 or w_out < 1:
        raise ShapeError(
            f"conv_transpose2d: invalid output extent {h_out}x{w_out}")
    hp, wp = h_out + 2 * pad, w_out + 2 * pad
    # reverse of the conv2d pipeline, each step replaced by its adjoint
    x2 = reshape(transpose(x, (0, 2, 3, 1)), (n * h * wd, ci))
    wmat = reshape(w, (ci, co * kh * kw))
    cols = matmul(x2, wmat)  # (n*h*wd, co*kh*kw)
    idx = _im2col_index(n, co, hp, wp, kh, kw, stride)
    padded = scatter_flat(cols, idx, (n, co, hp, wp))
    out = padded if pad == 0 else getitem(
        padded, (slice(None), slice(None), slice(pad, pad + h_out),
                 slice(pad, pad + w_out)))
    if b is not None:
        if b.shape != (co,):
            raise ShapeError(f"conv_transpose2d: bias shape {b.shape} != ({co},)")
        out = out + reshape(b, (1, co, 1, 1))
    return out


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization using the statistics of the current batch.

    No running averages are kept; adaptation and evaluation both use the
    batch at hand, so batches of a single sample are rejected.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm: need NCHW input, got {x.shape}")
    n, c = x.shape[0], x.shape[1]
    if n < 2:
        raise ShapeError(
            f"batch_norm: batch of {n} sample(s); need at least 2 per forward")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batch_norm: gamma/beta shapes {gamma.shape}/{beta.shape} != ({c},)")
    if eps <= 0:
        raise ValueError(f"batch_norm: eps must be positive, got {eps}")
    mu = tmean(x, axis=(0, 2, 3), keepdims=True)
    xc = sub(x, mu)
    var = tmean(mul(xc, xc), axis=(0, 2, 3), keepdims=True)
    inv = div_sqrt(var, eps)
    xhat = mul(xc, inv)
    return mul(xhat, reshape(gamma, (1, c, 1, 1))) + reshape(beta, (1, c, 1, 1))


def div_sqrt(var: Tensor, eps: float) -> Tensor:
    return (var + _lift(eps)) ** -0.5


def max_pool2d(x: Tensor, window: int = 2, stride: int | None = None) -> Tensor:
    """Per-window maximum; gradient routes to the first max in row-major order.

    Trailing rows/columns that do not fill a window are dropped (floor
    semantics: 84 -> 42 -> 21 -> 10 -> 5 under window 2).
    """
    if stride is None:
        stride = window
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: need NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(
            f"max_pool2d: window {window} larger than input {h}x{w}")
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    # window membership indices, row-major within each window
    idx = _im2col_index(n * c, 1, h, w, window, window, stride)
    idx = idx.reshape(n * c, oh * ow, window * window)
    vals = x.data.reshape(-1)[idx]
    arg = vals.argmax(axis=2)  # first occurrence on ties
    flat = np.take_along_axis(idx, arg[:, :, None], axis=2)[:, :, 0]
    return gather_flat(x, flat, (n, c, oh, ow))


def linear(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    """Affine map (batch, d_in) @ (d_in, d_out) + bias."""
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"linear: need 2-d input/weights, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(
            f"linear: input dim {x.shape[1]} != weight rows {w.shape[0]}")
    out = matmul(x, w)
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
        out = out + reshape(b, (1, w.shape[1]))
    return out


def softmax_rows(scores: Tensor) -> Tensor:
    """Row-wise softmax, stabilized by subtracting the (detached) row max."""
    m = Tensor(scores.data.max(axis=1, keepdims=True), op="const")
    e = texp(sub(scores, m))
    return e / tsum(e, axis=1, keepdims=True)


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q kᵀ / sqrt(d)) v over 2-d token matrices."""
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError(
            f"attention: need 2-d q/k/v, got {q.shape}, {k.shape}, {v.shape}")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(
            f"attention: query dim {q.shape[1]} != key dim {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(
            f"attention: {k.shape[0]} keys but {v.shape[0]} values")
    scores = matmul(q, transpose(k, None)) * _lift(1.0 / np.sqrt(q.shape[1]))
    return matmul(softmax_rows(scores), v)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-softmax of the true class, max-subtracted for stability."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: need (batch, classes), got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(
            f"cross_entropy: labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(
            f"cross_entropy: label out of range [0, {k}): "
            f"min={labels.min()}, max={labels.max()}")
    m = Tensor(logits.data.max(axis=1, keepdims=True), op="const")
    z = sub(logits, m)
    lse = tlog(tsum(texp(z), axis=1))
    onehot = np.zeros((n, k), dtype=logits.data.dtype)
    onehot[np.arange(n), labels] = 1.0
    picked = tsum(mul(z, Tensor(onehot, op="const")), axis=1)
    return tmean(sub(lse, picked))


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over all elements of the squared difference."""
    if pred.shape != target.shape:
        raise ShapeError(
            f"mse: pred shape {pred.shape} != target shape {target.shape}")
    d = sub(pred, target)
    return tmean(mul(d, d))


def channel_modulate(x: Tensor, m: Tensor) -> Tensor:
    """Scale each channel of an NCHW tensor by its multiplier.

    A multiplier of exactly one reproduces the input bit for bit.
    """
    if x.ndim != 4:
        raise ShapeError(f"channel_modulate: need NCHW input, got {x.shape}")
    if m.ndim != 1 or m.shape[0] != x.shape[1]:
        raise ShapeError(
            f"channel_modulate: multiplier length {m.shape} != channel count "
            f"{x.shape[1]}")
    return mul(x, reshape(m, (1, x.shape[1], 1, 1)))


@dataclass
class GaussianParams:
    """Diagonal Gaussian with strictly positive scale."""

    mu: Tensor
    sigma: Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ShapeError(
                f"GaussianParams: mu shape {self.mu.shape} != sigma shape "
                f"{self.sigma.shape}")
        if np.any(self.sigma.data <= 0):
            raise ValueError("GaussianParams: sigma must be strictly positive")


SIGMA_FLOOR = 1e-6


def positive_sigma(raw: Tensor) -> Tensor:
    """softplus(raw) + floor; guarantees the positivity invariant."""
    return softplus(raw) + _lift(SIGMA_FLOOR)


def kl_diag_gaussian(q: GaussianParams, p: GaussianParams) -> Tensor:
    """Closed-form KL(q || p) for diagonal Gaussians, summed over dimensions."""
    if q.mu.shape != p.mu.shape:
        raise ShapeError(
            f"kl_diag_gaussian: shapes {q.mu.shape} vs {p.mu.shape} differ")
    lsq = tlog(q.sigma)
    lsp = tlog(p.sigma)
    var_ratio = mul(q.sigma, q.sigma) / mul(p.sigma, p.sigma)
    dmu = sub(q.mu, p.mu)
    quad = mul(dmu, dmu) / mul(p.sigma, p.sigma)
    terms = sub(lsp, lsq) + (var_ratio + quad) * _lift(0.5) - _lift(0.5)
    return tsum(terms)


def reparam_sample(g: GaussianParams, noise: Tensor) -> Tensor:
    """mu + sigma * noise with externally supplied noise (injectable)."""
    if noise.shape != g.mu.shape:
        raise ShapeError(
            f"reparam_sample: noise shape {noise.shape} != mu shape {g.mu.shape}")
    return g.mu + mul(g.sigma, noise)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True,
                  op="param")


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, op="param")


def ones_param(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, op="param")
