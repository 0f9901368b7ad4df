"""Minimal numeric substrate for the channel gating engine.

Dense and grouped 2-D convolution (im2col fast path plus a naive
direct-loop reference that serves as the correctness oracle), batch
normalization, activations, pooling, fully-connected layers,
softmax / cross-entropy, and SGD with momentum.

Conventions:
  * everything is float64 numpy;
  * a feature map is (channel, height, width), a batch is
    (batch, channel, height, width); most entry points accept either
    and treat rank-3 input as a batch of one;
  * conv weights are (out_channel, in_channel/groups, kh, kw), row
    major, so channel groups are contiguous slices;
  * convolutions carry no bias (batch normalization absorbs it).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided


class ConfigurationError(ValueError):
    """Shapes or hyperparameters are inconsistent."""


class DegenerateInputError(ValueError):
    """Input has no elements along the axes a statistic needs."""


class StateError(RuntimeError):
    """Operation invoked in the wrong state (e.g. stats not frozen)."""


ACTIVATION_KINDS = ("relu", "tanh", "sigmoid", "binary_sign", "identity")


def _as_batch(x):
    """Promote (c,h,w) to (1,c,h,w); return (batch, was_batched)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], False
    if x.ndim == 4:
        return x, True
    raise ConfigurationError(f"expected rank-3 or rank-4 feature tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

@dataclass
class ConvSpec:
    """Static shape description of one 2-D convolution."""

    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_size", "stride", "groups"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"ConvSpec.{name} must be >= 1, got {getattr(self, name)}")
        if self.padding < 0:
            raise ConfigurationError(f"ConvSpec.padding must be >= 0, got {self.padding}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigurationError(
                f"channels ({self.in_channels} in, {self.out_channels} out) "
                f"not divisible by groups={self.groups}")

    def out_hw(self, h, w):
        ho = (h + 2 * self.padding - self.kernel_size) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel_size) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ConfigurationError(
                f"conv output would be {ho}x{wo} for input {h}x{w} (spec {self})")
        return ho, wo

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels // self.groups,
                self.kernel_size, self.kernel_size)


@dataclass
class ConvCtx:
    spec: ConvSpec
    w: np.ndarray
    cols: list            # per group: (n, cg_in*k*k, ho*wo)
    x_shape: tuple
    padded_hw: tuple
    out_hw: tuple


def _check_conv(x, w, spec):
    if x.shape[1] != spec.in_channels:
        raise ConfigurationError(
            f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if w.shape != spec.weight_shape:
        raise ConfigurationError(
            f"weight shape {w.shape} does not match spec {spec.weight_shape}")


def _im2col(xp, k, stride, ho, wo):
    n, c, hp, wp = xp.shape
    sn, sc, sh, sw = xp.strides
    win = as_strided(xp, (n, c, k, k, ho, wo),
                     (sn, sc, sh, sw, stride * sh, stride * sw))
    return np.ascontiguousarray(win).reshape(n, c * k * k, ho * wo)


def _col2im(dcols, n, c, hp, wp, k, stride, ho, wo):
    dx = np.zeros((n, c, hp, wp))
    dc = dcols.reshape(n, c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dc[:, :, i, j]
    return dx


def conv2d_forward(x, w, spec: ConvSpec):
    """Grouped 2-D cross-correlation via im2col; returns (y, ctx) batched."""
    xb, _ = _as_batch(x)
    w = np.asarray(w, dtype=np.float64)
    _check_conv(xb, w, spec)
    n, c, h, wd = xb.shape
    k, s, p, g = spec.kernel_size, spec.stride, spec.padding, spec.groups
    ho, wo = spec.out_hw(h, wd)
    xp = np.pad(xb, ((0, 0), (0, 0), (p, p), (p, p))) if p else xb
    cg_in = c // g
    cg_out = spec.out_channels // g
    y = np.empty((n, spec.out_channels, ho * wo))
    cols = []
    for gi in range(g):
        cg = _im2col(xp[:, gi * cg_in:(gi + 1) * cg_in], k, s, ho, wo)
        wm = w[gi * cg_out:(gi + 1) * cg_out].reshape(cg_out, -1)
        y[:, gi * cg_out:(gi + 1) * cg_out] = np.matmul(wm, cg)
        cols.append(cg)
    ctx = ConvCtx(spec, w, cols, xb.shape, xp.shape[2:], (ho, wo))
    return y.reshape(n, spec.out_channels, ho, wo), ctx


def conv2d(x, w, spec: ConvSpec):
    """Grouped 2-D cross-correlation. Accepts (c,h,w) or (n,c,h,w)."""
    xb, batched = _as_batch(x)
    y, _ = conv2d_forward(xb, w, spec)
    return y if batched else y[0]


def conv2d_backward(ctx: ConvCtx, dy):
    """Gradients of conv2d; returns (dx, dw)."""
    if ctx.cols is None:
        raise StateError("conv backward called without a cached forward context")
    spec = ctx.spec
    n = ctx.x_shape[0]
    k, s, p, g = spec.kernel_size, spec.stride, spec.padding, spec.groups
    ho, wo = ctx.out_hw
    hp, wp = ctx.padded_hw
    cg_in = spec.in_channels // g
    cg_out = spec.out_channels // g
    dyb = np.asarray(dy, dtype=np.float64).reshape(n, spec.out_channels, ho * wo)
    dw = np.empty_like(ctx.w)
    dxp = np.empty((n, spec.in_channels, hp, wp))
    for gi in range(g):
        dym = dyb[:, gi * cg_out:(gi + 1) * cg_out]
        cols = ctx.cols[gi]
        dw[gi * cg_out:(gi + 1) * cg_out] = (
            np.einsum("nol,nkl->ok", dym, cols).reshape(cg_out, cg_in, k, k))
        wm = ctx.w[gi * cg_out:(gi + 1) * cg_out].reshape(cg_out, -1)
        dcols = np.matmul(wm.T, dym)
        dxp[:, gi * cg_in:(gi + 1) * cg_in] = _col2im(
            dcols, n, cg_in, hp, wp, k, s, ho, wo)
    dx = dxp[:, :, p:hp - p, p:wp - p] if p else dxp
    return dx, dw


def conv2d_reference(x, w, spec: ConvSpec):
    """Naive direct-loop convolution. Slow; the oracle for conv2d."""
    xb, batched = _as_batch(x)
    w = np.asarray(w, dtype=np.float64)
    _check_conv(xb, w, spec)
    n, c, h, wd = xb.shape
    k, s, p, g = spec.kernel_size, spec.stride, spec.padding, spec.groups
    ho, wo = spec.out_hw(h, wd)
    cg_in = c // g
    cg_out = spec.out_channels // g
    y = np.zeros((n, spec.out_channels, ho, wo))
    for ni in range(n):
        for oc in range(spec.out_channels):
            gi = oc // cg_out
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for ic in range(cg_in):
                        for ky in range(k):
                            for kx in range(k):
                                iy = oy * s + ky - p
                                ix = ox * s + kx - p
                                if 0 <= iy < h and 0 <= ix < wd:
                                    acc += (xb[ni, gi * cg_in + ic, iy, ix]
                                            * w[oc, ic, ky, kx])
                    y[ni, oc, oy, ox] = acc
    return y if batched else y[0]


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    """Per-channel batch-norm parameters and running statistics.

    Running stats update as  running <- momentum*running + (1-momentum)*batch.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    def __post_init__(self):
        c = len(self.gamma)
        for name in ("beta", "running_mean", "running_var"):
            if len(getattr(self, name)) != c:
                raise ConfigurationError(f"BatchNormState.{name} length != channel count {c}")
        if not 0.0 < self.momentum < 1.0:
            raise ConfigurationError("BatchNormState.momentum must be in (0,1)")
        if np.any(self.running_var < 0):
            raise ConfigurationError("BatchNormState.running_var entries must be >= 0")

    @classmethod
    def create(cls, channels, momentum=0.9, eps=1e-5):
        return cls(np.ones(channels), np.zeros(channels),
                   np.zeros(channels), np.ones(channels), momentum, eps)

    def copy(self):
        return BatchNormState(self.gamma.copy(), self.beta.copy(),
                              self.running_mean.copy(), self.running_var.copy(),
                              self.momentum, self.eps)


@dataclass
class BnCtx:
    xhat: np.ndarray
    inv_std: np.ndarray       # (c,)
    gamma: np.ndarray | None  # None when affine=False
    count: int


def _per_channel(v):
    return np.asarray(v)[:, None, None]


def bn_forward(x, st: BatchNormState, training=False, affine=True,
               update_running=True, want_ctx=False):
    """Batch normalization over (n|,c,h,w); returns (y, ctx-or-None).

    Inference applies, per channel and in exactly this order,
    ``(x - mean) * scale + shift`` with ``scale = gamma / sqrt(var + eps)``
    (gamma omitted when affine=False); the scalar oracle in the tests
    mirrors that sequence.
    """
    xb, batched = _as_batch(x)
    if xb.shape[1] != len(st.gamma):
        raise ConfigurationError(
            f"input has {xb.shape[1]} channels, BN state has {len(st.gamma)}")
    ctx = None
    if training:
        n, c, h, w = xb.shape
        count = n * h * w
        if count == 0:
            raise DegenerateInputError("batch normalization over zero elements per channel")
        mean = xb.mean(axis=(0, 2, 3))
        var = xb.var(axis=(0, 2, 3))
        if update_running:
            m = st.momentum
            st.running_mean[:] = m * st.running_mean + (1.0 - m) * mean
            st.running_var[:] = m * st.running_var + (1.0 - m) * var
        inv_std = 1.0 / np.sqrt(var + st.eps)
        xhat = (xb - _per_channel(mean)) * _per_channel(inv_std)
        y = _per_channel(st.gamma) * xhat + _per_channel(st.beta) if affine else xhat
        if want_ctx:
            ctx = BnCtx(xhat, inv_std, st.gamma if affine else None, count)
    else:
        scale = 1.0 / np.sqrt(st.running_var + st.eps)
        if affine:
            scale = st.gamma / np.sqrt(st.running_var + st.eps)
        shift = st.beta if affine else np.zeros_like(st.running_mean)
        y = (xb - _per_channel(st.running_mean)) * _per_channel(scale) + _per_channel(shift)
    return (y if batched else y[0]), ctx


def batchnorm_forward(x, st: BatchNormState, training=False, affine=True,
                      update_running=True):
    y, _ = bn_forward(x, st, training, affine, update_running)
    return y


def batchnorm_backward(ctx: BnCtx, dy):
    """Gradients through training-mode BN; returns (dx, dgamma, dbeta)."""
    if ctx is None:
        raise StateError("BN backward called without a cached forward context")
    dyb, _ = _as_batch(dy)
    axes = (0, 2, 3)
    if ctx.gamma is not None:
        dgamma = (dyb * ctx.xhat).sum(axis=axes)
        dbeta = dyb.sum(axis=axes)
        dxhat = dyb * _per_channel(ctx.gamma)
    else:
        dgamma = dbeta = None
        dxhat = dyb
    m = float(ctx.count)
    sum_dxhat = dxhat.sum(axis=axes)
    sum_dxhat_xhat = (dxhat * ctx.xhat).sum(axis=axes)
    dx = (_per_channel(ctx.inv_std) / m) * (
        m * dxhat - _per_channel(sum_dxhat) - ctx.xhat * _per_channel(sum_dxhat_xhat))
    return dx, dgamma, dbeta


def bn_inference_affine(st: BatchNormState, gamma=None, beta=None):
    """Per-channel (scale, shift) of the frozen-stats BN transform."""
    g = st.gamma if gamma is None else gamma
    b = st.beta if beta is None else beta
    scale = g / np.sqrt(st.running_var + st.eps)
    shift = b - st.running_mean * scale
    return scale, shift


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def activation(x, kind):
    """Elementwise activation. binary_sign maps x >= 0 to +1, else -1."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "sigmoid":
        return 1.0 / (1.0 + np.exp(-x))
    if kind == "binary_sign":
        return np.where(x >= 0.0, 1.0, -1.0)
    if kind == "identity":
        return x.copy()
    raise ConfigurationError(f"unknown activation kind {kind!r}")


def activation_grad(pre, kind):
    """f'(pre). binary_sign uses the straight-through clip window |x| <= 1."""
    pre = np.asarray(pre, dtype=np.float64)
    if kind == "relu":
        return (pre > 0.0).astype(np.float64)
    if kind == "tanh":
        t = np.tanh(pre)
        return 1.0 - t * t
    if kind == "sigmoid":
        s = 1.0 / (1.0 + np.exp(-pre))
        return s * (1.0 - s)
    if kind == "binary_sign":
        return (np.abs(pre) <= 1.0).astype(np.float64)
    if kind == "identity":
        return np.ones_like(pre)
    raise ConfigurationError(f"unknown activation kind {kind!r}")


# ---------------------------------------------------------------------------
# Pooling (kernel == stride, spatial dims divisible; enough for the nets here)
# ---------------------------------------------------------------------------

@dataclass
class PoolCtx:
    kind: str
    k: int
    in_shape: tuple
    argmax: np.ndarray | None


def _pool_windows(xb, k):
    n, c, h, w = xb.shape
    if h % k or w % k:
        raise ConfigurationError(f"pooling needs spatial dims divisible by {k}, got {h}x{w}")
    ho, wo = h // k, w // k
    return xb.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, ho, wo, k * k), ho, wo


def maxpool2d_forward(x, k=2):
    xb, _ = _as_batch(x)
    win, ho, wo = _pool_windows(xb, k)
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, PoolCtx("max", k, xb.shape, idx)


def avgpool2d_forward(x, k=2):
    xb, _ = _as_batch(x)
    win, ho, wo = _pool_windows(xb, k)
    return win.mean(axis=-1), PoolCtx("avg", k, xb.shape, None)


def pool2d_backward(ctx: PoolCtx, dy):
    n, c, h, w = ctx.in_shape
    k = ctx.k
    ho, wo = h // k, w // k
    dwin = np.zeros((n, c, ho, wo, k * k))
    dyb = np.asarray(dy, dtype=np.float64)
    if ctx.kind == "max":
        np.put_along_axis(dwin, ctx.argmax[..., None], dyb[..., None], axis=-1)
    else:
        dwin += dyb[..., None] / (k * k)
    return dwin.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


# ---------------------------------------------------------------------------
# Fully connected / losses
# ---------------------------------------------------------------------------

def linear_forward(x, w):
    """x: (n, f_in), w: (f_out, f_in); no bias (BN convention)."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ConfigurationError(f"linear shapes mismatch: x {x.shape}, w {w.shape}")
    return x @ w.T, x


def linear_backward(ctx_x, w, dy):
    dy = np.asarray(dy, dtype=np.float64)
    return dy @ w, dy.T @ ctx_x


def softmax(logits, temperature=1.0):
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, labels):
    """Mean cross-entropy over the batch; returns (loss, dlogits)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n = logits.shape[0]
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return loss, d / n


def accuracy(logits, labels):
    return float((np.argmax(logits, axis=-1) == np.asarray(labels)).mean())


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def sgd_step(params, grads, velocities, lr, momentum=0.0, weight_decay=0.0):
    """In-place SGD with momentum:
    v <- momentum*v + grad + weight_decay*param;  param <- param - lr*v.
    """
    if not (len(params) == len(grads) == len(velocities)):
        raise ConfigurationError("params/grads/velocities length mismatch")
    for p, g, v in zip(params, grads, velocities):
        if p.shape != g.shape or p.shape != v.shape:
            raise ConfigurationError(f"sgd shape mismatch: {p.shape} vs {g.shape} vs {v.shape}")
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v
    return params
