"""Layer forward passes and their hand-derived reverse-mode backward passes.

Two levels live here.  The functional level works on plain ndarrays, keeps
the caller's float dtype (float64 in -> float64 out, which is what the
finite-difference checks run on) and always accumulates inner products in
float64.  The class level wraps parameters in `Tensor`s, caches whatever
the backward pass needs, and accumulates parameter gradients into
`Tensor.grad`.

Convolution is organized as a loop over kernel taps: for every tap the
strided window of the padded input is gathered and contracted against the
tap's weights with one batched matmul per group set.  The naive
loop-per-output formulation remains the source of truth in the test
suite; this path only has to match it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBatchError, ModeError, ShapeError, StateError
from .tensor import Rng, Tensor, he_normal_init, zeros


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, (tuple, list)):
        if len(v) != 3:
            raise ShapeError(f"expected 3 extents, got {v!r}")
        return tuple(int(e) for e in v)
    return (int(v),) * 3


def conv3d_output_shape(spatial, kernel, stride, padding) -> tuple[int, int, int]:
    """floor((e + 2p - k) / s) + 1 per axis; raises if any extent < 1."""
    out = []
    for e, k, s, p in zip(spatial, kernel, stride, padding):
        padded = e + 2 * p
        if padded < k:
            raise ShapeError(
                f"kernel {k} does not fit extent {e} with padding {p}"
            )
        out.append((padded - k) // s + 1)
    return tuple(out)


def _check_conv_args(x, weight, stride, padding, groups):
    if x.ndim != 5:
        raise ShapeError(f"conv3d input must be 5-d (N,C,D,H,W), got {x.shape}")
    if weight.ndim != 5:
        raise ShapeError(f"conv3d weight must be 5-d, got {weight.shape}")
    c_out, cin_g = weight.shape[:2]
    c_in = x.shape[1]
    if groups < 1:
        raise ShapeError(f"groups must be >= 1, got {groups}")
    if c_in % groups or c_out % groups:
        raise ShapeError(
            f"channels ({c_in} in, {c_out} out) not divisible by groups {groups}"
        )
    if cin_g != c_in // groups:
        raise ShapeError(
            f"weight expects {cin_g} channels per group, input provides {c_in // groups}"
        )
    if any(s < 1 for s in stride) or any(p < 0 for p in padding):
        raise ShapeError(f"bad stride {stride} or padding {padding}")


def _padded_channels_first(x, padding):
    """Zero-padded copy of x laid out (C, N, Dp, Hp, Wp) in float64."""
    n, c, d, h, w = x.shape
    pd, ph, pw = padding
    out = np.zeros((c, n, d + 2 * pd, h + 2 * ph, w + 2 * pw), dtype=np.float64)
    out[:, :, pd : pd + d, ph : ph + h, pw : pw + w] = x.transpose(1, 0, 2, 3, 4)
    return out


def _tap_window(buf, tap, stride, out_spatial):
    """Strided view of the (C,N,Dp,Hp,Wp) buffer for one kernel tap."""
    kd, kh, kw = tap
    sd, sh, sw = stride
    od, oh, ow = out_spatial
    return buf[
        :,
        :,
        kd : kd + sd * (od - 1) + 1 : sd,
        kh : kh + sh * (oh - 1) + 1 : sh,
        kw : kw + sw * (ow - 1) + 1 : sw,
    ]


def conv3d(x, weight, bias=None, stride=(1, 1, 1), padding=(0, 0, 0), groups=1):
    """Grouped 3D cross-correlation with zero padding.

    x: (N, C_in, D, H, W); weight: (C_out, C_in/groups, kD, kH, kW);
    bias: (C_out,) or None.  Taps accumulate in float64 in fixed
    (kd, kh, kw, c_in) order; the result is cast back to x's dtype.
    """
    stride, padding = _triple(stride), _triple(padding)
    _check_conv_args(x, weight, stride, padding, groups)
    n, c_in = x.shape[:2]
    c_out = weight.shape[0]
    kernel = weight.shape[2:]
    out_spatial = conv3d_output_shape(x.shape[2:], kernel, stride, padding)
    cin_g, cout_g = c_in // groups, c_out // groups
    p = n * int(np.prod(out_spatial))

    xp = _padded_channels_first(x, padding)
    w64 = weight.astype(np.float64).reshape(groups, cout_g, cin_g, *kernel)
    acc = np.zeros((groups, cout_g, p), dtype=np.float64)
    for kd in range(kernel[0]):
        for kh in range(kernel[1]):
            for kw in range(kernel[2]):
                win = _tap_window(xp, (kd, kh, kw), stride, out_spatial)
                xv = win.reshape(groups, cin_g, p)
                acc += np.matmul(w64[:, :, :, kd, kh, kw], xv)
    y = acc.reshape(c_out, n, *out_spatial).transpose(1, 0, 2, 3, 4)
    if bias is not None:
        y = y + bias.astype(np.float64)[None, :, None, None, None]
    return y.astype(x.dtype, copy=False)


def conv3d_backward(
    grad_out,
    x,
    weight,
    stride=(1, 1, 1),
    padding=(0, 0, 0),
    groups=1,
    with_bias=False,
):
    """Adjoints of conv3d: (grad_input, grad_weight, grad_bias).

    grad_bias is None unless with_bias.  Same tap ordering and float64
    accumulation as the forward pass.
    """
    stride, padding = _triple(stride), _triple(padding)
    _check_conv_args(x, weight, stride, padding, groups)
    n, c_in = x.shape[:2]
    c_out = weight.shape[0]
    kernel = weight.shape[2:]
    out_spatial = conv3d_output_shape(x.shape[2:], kernel, stride, padding)
    if grad_out.shape != (n, c_out, *out_spatial):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} != forward output {(n, c_out, *out_spatial)}"
        )
    cin_g, cout_g = c_in // groups, c_out // groups
    p = n * int(np.prod(out_spatial))
    pd, ph, pw = padding
    d, h, w = x.shape[2:]

    gy = grad_out.astype(np.float64).transpose(1, 0, 2, 3, 4).reshape(groups, cout_g, p)
    xp = _padded_channels_first(x, padding)
    w64 = weight.astype(np.float64).reshape(groups, cout_g, cin_g, *kernel)

    gxp = np.zeros_like(xp)
    gw = np.zeros((groups, cout_g, cin_g, *kernel), dtype=np.float64)
    for kd in range(kernel[0]):
        for kh in range(kernel[1]):
            for kw in range(kernel[2]):
                win = _tap_window(xp, (kd, kh, kw), stride, out_spatial)
                xv = win.reshape(groups, cin_g, p)
                gw[:, :, :, kd, kh, kw] = np.matmul(gy, xv.transpose(0, 2, 1))
                gx_tap = np.matmul(w64[:, :, :, kd, kh, kw].transpose(0, 2, 1), gy)
                dst = _tap_window(gxp, (kd, kh, kw), stride, out_spatial)
                dst += gx_tap.reshape(c_in, n, *out_spatial)

    gx = gxp[:, :, pd : pd + d, ph : ph + h, pw : pw + w].transpose(1, 0, 2, 3, 4)
    grad_input = gx.astype(x.dtype, copy=False)
    grad_weight = gw.reshape(c_out, cin_g, *kernel).astype(weight.dtype, copy=False)
    grad_bias = None
    if with_bias:
        grad_bias = (
            grad_out.astype(np.float64).sum(axis=(0, 2, 3, 4)).astype(x.dtype, copy=False)
        )
    return grad_input, grad_weight, grad_bias


_BN_AXES = (0, 2, 3, 4)


@dataclass
class BnCache:
    xhat: np.ndarray
    invstd: np.ndarray  # per channel, float64
    mean: np.ndarray  # per channel, float64
    var: np.ndarray  # biased, per channel, float64
    count: int  # N*D*H*W


def batchnorm3d_train(x, gamma, beta, epsilon):
    """Per-channel normalization over (N,D,H,W) with biased batch variance."""
    if x.ndim != 5:
        raise ShapeError(f"batchnorm3d input must be 5-d, got {x.shape}")
    n, c, d, h, w = x.shape
    count = n * d * h * w
    if count < 2:
        raise DegenerateBatchError(
            f"train-mode statistics need at least 2 elements per channel, got {count}"
        )
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=_BN_AXES)
    xc = x64 - mean[None, :, None, None, None]
    var = np.mean(xc * xc, axis=_BN_AXES)
    invstd = 1.0 / np.sqrt(var + epsilon)
    xhat = xc * invstd[None, :, None, None, None]
    y = gamma.astype(np.float64)[None, :, None, None, None] * xhat
    y += beta.astype(np.float64)[None, :, None, None, None]
    cache = BnCache(xhat.astype(x.dtype, copy=False), invstd, mean, var, count)
    return y.astype(x.dtype, copy=False), cache


def batchnorm3d_eval(x, gamma, beta, running_mean, running_var, epsilon):
    """Affine normalization by stored running statistics."""
    if x.ndim != 5:
        raise ShapeError(f"batchnorm3d input must be 5-d, got {x.shape}")
    scale = gamma.astype(np.float64) / np.sqrt(running_var.astype(np.float64) + epsilon)
    shift = beta.astype(np.float64) - scale * running_mean.astype(np.float64)
    y = x.astype(np.float64) * scale[None, :, None, None, None]
    y += shift[None, :, None, None, None]
    return y.astype(x.dtype, copy=False)


def batchnorm3d_backward(grad_out, cache: BnCache, gamma):
    """Adjoint of the train-mode forward, batch statistics included."""
    g64 = grad_out.astype(np.float64)
    xhat = cache.xhat.astype(np.float64)
    m = float(cache.count)

    grad_beta = g64.sum(axis=_BN_AXES)
    grad_gamma = (g64 * xhat).sum(axis=_BN_AXES)

    gxhat = g64 * gamma.astype(np.float64)[None, :, None, None, None]
    sum_g = gxhat.sum(axis=_BN_AXES, keepdims=True)
    sum_gx = (gxhat * xhat).sum(axis=_BN_AXES, keepdims=True)
    gx = (gxhat - sum_g / m - xhat * (sum_gx / m)) * cache.invstd[
        None, :, None, None, None
    ]
    dt = grad_out.dtype
    return (
        gx.astype(dt, copy=False),
        grad_gamma.astype(dt, copy=False),
        grad_beta.astype(dt, copy=False),
    )


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    # gradient at exactly 0 is defined as 0
    return np.where(x > 0, grad_out, 0)


def global_avg_pool3d(x):
    """(N,C,D,H,W) -> (N,C) mean over all voxels."""
    if x.ndim != 5:
        raise ShapeError(f"global_avg_pool3d input must be 5-d, got {x.shape}")
    return x.mean(axis=(2, 3, 4), dtype=np.float64).astype(x.dtype, copy=False)


def global_avg_pool3d_backward(grad_out, spatial):
    d, h, w = spatial
    g = grad_out.astype(np.float64) / float(d * h * w)
    gx = np.broadcast_to(g[:, :, None, None, None], grad_out.shape + (d, h, w))
    return gx.astype(grad_out.dtype, copy=False).copy()


def linear(x, weight, bias):
    """y = x @ W.T + b with x (N, n_in), W (n_out, n_in), b (n_out,)."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"linear: input {x.shape} incompatible with weight {weight.shape}"
        )
    y = np.matmul(x.astype(np.float64), weight.astype(np.float64).T)
    if bias is not None:
        y += bias.astype(np.float64)
    return y.astype(x.dtype, copy=False)


def linear_backward(grad_out, x, weight):
    g64 = grad_out.astype(np.float64)
    gx = np.matmul(g64, weight.astype(np.float64))
    gw = np.matmul(g64.T, x.astype(np.float64))
    gb = g64.sum(axis=0)
    dt = grad_out.dtype
    return gx.astype(dt, copy=False), gw.astype(dt, copy=False), gb.astype(dt, copy=False)


class Conv3d:
    """Grouped 3D convolution layer; He-initialized, bias optional."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size,
        *,
        stride=1,
        padding=0,
        groups: int = 1,
        bias: bool = False,
        rng: Rng,
    ):
        kernel = _triple(kernel_size)
        if any(k < 1 for k in kernel):
            raise ShapeError(f"kernel extents must be >= 1, got {kernel}")
        if groups < 1 or in_channels % groups or out_channels % groups:
            raise ShapeError(
                f"channels ({in_channels} in, {out_channels} out) not divisible by groups {groups}"
            )
        self.stride = _triple(stride)
        self.padding = _triple(padding)
        self.groups = groups
        fan_in = (in_channels // groups) * kernel[0] * kernel[1] * kernel[2]
        self.weight = he_normal_init(
            (out_channels, in_channels // groups, *kernel), fan_in, rng
        )
        self.bias = zeros([out_channels]) if bias else None
        self._x = None

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        y = conv3d(
            x.data,
            self.weight.data,
            None if self.bias is None else self.bias.data,
            self.stride,
            self.padding,
            self.groups,
        )
        self._x = x.data if train else None
        return Tensor(y)

    def backward(self, grad_out: Tensor) -> Tensor:
        if self._x is None:
            raise StateError("conv3d backward called without a train-mode forward")
        gx, gw, gb = conv3d_backward(
            grad_out.data,
            self._x,
            self.weight.data,
            self.stride,
            self.padding,
            self.groups,
            with_bias=self.bias is not None,
        )
        self.weight.ensure_grad()
        self.weight.grad += gw
        if self.bias is not None:
            self.bias.ensure_grad()
            self.bias.grad += gb
        return Tensor(gx)

    def named_parameters(self):
        yield "weight", self.weight
        if self.bias is not None:
            yield "bias", self.bias


class BatchNorm3d:
    """Per-channel batch normalization over (N,D,H,W).

    Batch variance is biased (1/M); the running-variance update uses the
    unbiased estimate (M/(M-1)) scaled into an exponential moving average
    with factor `momentum`.
    """

    def __init__(self, channels: int, *, epsilon: float = 1e-5, momentum: float = 0.1):
        if epsilon <= 0:
            raise ShapeError(f"epsilon must be > 0, got {epsilon}")
        self.epsilon = float(epsilon)
        self.momentum = float(momentum)
        self.gamma = Tensor(np.ones(channels, dtype=np.float32))
        self.beta = zeros([channels])
        self.running_mean = zeros([channels])
        self.running_var = Tensor(np.ones(channels, dtype=np.float32))
        self._cache: BnCache | None = None
        self._mode = None

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        if train:
            y, cache = batchnorm3d_train(x.data, self.gamma.data, self.beta.data, self.epsilon)
            m = cache.count
            unbiased = cache.var * (m / (m - 1.0))
            rm = self.running_mean.data.astype(np.float64)
            rv = self.running_var.data.astype(np.float64)
            rm = (1.0 - self.momentum) * rm + self.momentum * cache.mean
            rv = (1.0 - self.momentum) * rv + self.momentum * unbiased
            self.running_mean.data[...] = rm.astype(np.float32)
            self.running_var.data[...] = rv.astype(np.float32)
            self._cache = cache
            self._mode = "train"
        else:
            y = batchnorm3d_eval(
                x.data,
                self.gamma.data,
                self.beta.data,
                self.running_mean.data,
                self.running_var.data,
                self.epsilon,
            )
            self._cache = None
            self._mode = "eval"
        return Tensor(y)

    def backward(self, grad_out: Tensor) -> Tensor:
        if self._mode == "eval":
            raise ModeError("batchnorm3d backward is only defined after a train-mode forward")
        if self._cache is None:
            raise StateError("batchnorm3d backward called without forward")
        gx, ggamma, gbeta = batchnorm3d_backward(grad_out.data, self._cache, self.gamma.data)
        self.gamma.ensure_grad()
        self.gamma.grad += ggamma
        self.beta.ensure_grad()
        self.beta.grad += gbeta
        return Tensor(gx)

    def named_parameters(self):
        yield "gamma", self.gamma
        yield "beta", self.beta

    def named_buffers(self):
        yield "running_mean", self.running_mean
        yield "running_var", self.running_var


class ReLU:
    def __init__(self):
        self._x = None

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        self._x = x.data if train else None
        return Tensor(relu(x.data))

    def backward(self, grad_out: Tensor) -> Tensor:
        if self._x is None:
            raise StateError("relu backward called without a train-mode forward")
        return Tensor(relu_backward(grad_out.data, self._x))


class GlobalAvgPool3d:
    def __init__(self):
        self._spatial = None

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        self._spatial = x.data.shape[2:] if train else None
        return Tensor(global_avg_pool3d(x.data))

    def backward(self, grad_out: Tensor) -> Tensor:
        if self._spatial is None:
            raise StateError("pool backward called without a train-mode forward")
        return Tensor(global_avg_pool3d_backward(grad_out.data, self._spatial))


class Linear:
    def __init__(self, in_features: int, out_features: int, *, rng: Rng):
        self.weight = he_normal_init((out_features, in_features), in_features, rng)
        self.bias = zeros([out_features])
        self._x = None

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        y = linear(x.data, self.weight.data, self.bias.data)
        self._x = x.data if train else None
        return Tensor(y)

    def backward(self, grad_out: Tensor) -> Tensor:
        if self._x is None:
            raise StateError("linear backward called without a train-mode forward")
        gx, gw, gb = linear_backward(grad_out.data, self._x, self.weight.data)
        self.weight.ensure_grad()
        self.weight.grad += gw
        self.bias.ensure_grad()
        self.bias.grad += gb
        return Tensor(gx)

    def named_parameters(self):
        yield "weight", self.weight
        yield "bias", self.bias
