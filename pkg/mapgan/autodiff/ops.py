"""Differentiable operations for image models.

All operations take and return NCHW float32 tensors unless stated otherwise.
Convolutions use zero padding and square kernels; `conv_transpose2d` with
kernel `k` is exactly the input-gradient map of `conv2d` with the same `k`.
"""
import enum

import numpy as np

from typing import Optional  # noqa F401

from mapgan.autodiff.tensor import DTYPE, Function, ShapeError, Tensor

BATCH_NORM_EPS = 1e-5
BATCH_NORM_MOMENTUM = 0.1

# float32 neighbours of the open interval ends
_BELOW_ONE = np.nextafter(DTYPE(1.0), DTYPE(0.0))
_ABOVE_ZERO = np.nextafter(DTYPE(0.0), DTYPE(1.0))


@enum.unique
class Mode(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


def conv_output_size(size, kernel, stride, padding):
    # type: (int, int, int, int) -> int
    return (size + 2 * padding - kernel) // stride + 1


def conv_transpose_output_size(size, kernel, stride, padding):
    # type: (int, int, int, int) -> int
    return (size - 1) * stride - 2 * padding + kernel


def _check_conv_args(kernel_size, stride, padding):
    if kernel_size < 1:
        raise ShapeError("kernel size must be >= 1, got {}".format(kernel_size))
    if stride < 1:
        raise ShapeError("stride must be >= 1, got {}".format(stride))
    if padding < 0:
        raise ShapeError("padding must be >= 0, got {}".format(padding))


def _windows(padded, kernel_size, stride, out_h, out_w):
    """Strided view (B, C, out_h, out_w, K, K) of an already padded input."""
    b, c = padded.shape[:2]
    sb, sc, sh, sw = padded.strides
    return np.lib.stride_tricks.as_strided(
        padded,
        shape=(b, c, out_h, out_w, kernel_size, kernel_size),
        strides=(sb, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )


def _scatter_windows(cols, padded_shape, kernel_size, stride):
    """Adjoint of `_windows`: sum (B, C, H, W, K, K) patches into an array."""
    out = np.zeros(padded_shape, dtype=DTYPE)
    out_h, out_w = cols.shape[2:4]
    for i in range(kernel_size):
        for j in range(kernel_size):
            out[
                :,
                :,
                i : i + stride * out_h : stride,
                j : j + stride * out_w : stride,
            ] += cols[:, :, :, :, i, j]
    return out


def _pad(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _unpad(x, padding):
    if padding == 0:
        return x
    return x[:, :, padding:-padding, padding:-padding]


def _im2col(padded, kernel_size, stride, out_h, out_w):
    """Contiguous (B*out_h*out_w, C*K*K) matrix of the windows of a padded input."""
    b, c = padded.shape[:2]
    windows = _windows(padded, kernel_size, stride, out_h, out_w)
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(b * out_h * out_w, c * kernel_size * kernel_size)


def _rows(x):
    """(B*H*W, C) matrix of an NCHW array."""
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1)).reshape(-1, x.shape[1])


def _correlate_cols(cols, kernel, batch, out_h, out_w):
    # out[b, o, y, x] = sum_{c,i,j} kernel[o, c, i, j] * window[b, c, y, x, i, j]
    out = np.matmul(cols, kernel.reshape(kernel.shape[0], -1).T)
    out = out.reshape(batch, out_h, out_w, kernel.shape[0]).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out, dtype=DTYPE)


def _correlate(padded, kernel, stride, out_h, out_w):
    cols = _im2col(padded, kernel.shape[-1], stride, out_h, out_w)
    return _correlate_cols(cols, kernel, padded.shape[0], out_h, out_w)


def _spread(x, kernel, stride, padded_shape):
    # adjoint of _correlate w.r.t. its input
    b, c_in, h, w = x.shape
    k = kernel.shape[-1]
    cols = np.matmul(_rows(x), kernel.reshape(c_in, -1))
    cols = cols.reshape(b, h, w, kernel.shape[1], k, k).transpose(0, 3, 1, 2, 4, 5)
    return _scatter_windows(cols, padded_shape, k, stride)


class Conv2d(Function):
    def forward(self, x, kernel, *bias, **kwargs):
        stride, padding = kwargs["stride"], kwargs["padding"]
        k = kernel.shape[-1]
        b, _, h, w = x.shape
        self.stride, self.padding = stride, padding
        self.has_bias = len(bias) == 1

        self.padded = _pad(x, padding)
        self.out_h = conv_output_size(h, k, stride, padding)
        self.out_w = conv_output_size(w, k, stride, padding)
        self.kernel = kernel

        out = _correlate(self.padded, kernel, stride, self.out_h, self.out_w)
        if self.has_bias:
            out += bias[0].reshape(1, -1, 1, 1)
        return out

    def backward(self, grad):
        k = self.kernel.shape[-1]
        cols = _im2col(self.padded, k, self.stride, self.out_h, self.out_w)
        grad_kernel = np.matmul(_rows(grad).T, cols).reshape(self.kernel.shape)
        grad_padded = _spread(grad, self.kernel, self.stride, self.padded.shape)
        grad_input = _unpad(grad_padded, self.padding)

        grads = (grad_input, grad_kernel)
        if self.has_bias:
            grads += (grad.sum(axis=(0, 2, 3)),)
        return grads


class ConvTranspose2d(Function):
    def forward(self, x, kernel, *bias, **kwargs):
        stride, padding = kwargs["stride"], kwargs["padding"]
        k = kernel.shape[-1]
        b, _, h, w = x.shape
        self.stride, self.padding = stride, padding
        self.has_bias = len(bias) == 1
        self.x, self.kernel = x, kernel

        self.full_shape = (
            b,
            kernel.shape[1],
            (h - 1) * stride + k,
            (w - 1) * stride + k,
        )
        out = _unpad(_spread(x, kernel, stride, self.full_shape), padding)
        out = np.ascontiguousarray(out)
        if self.has_bias:
            out += bias[0].reshape(1, -1, 1, 1)
        return out

    def backward(self, grad):
        k = self.kernel.shape[-1]
        b, _, h, w = self.x.shape
        cols = _im2col(_pad(grad, self.padding), k, self.stride, h, w)
        grad_input = _correlate_cols(cols, self.kernel, b, h, w)
        grad_kernel = np.matmul(_rows(self.x).T, cols).reshape(self.kernel.shape)

        grads = (grad_input, grad_kernel)
        if self.has_bias:
            grads += (grad.sum(axis=(0, 2, 3)),)
        return grads


def _check_conv_input(x, kernel, bias, in_axis, out_axis, op_name):
    if len(x.shape) != 4 or len(kernel.shape) != 4:
        raise ShapeError(
            "{} expects 4-d input and kernel, got {} and {}".format(
                op_name, x.shape, kernel.shape
            )
        )
    if kernel.shape[2] != kernel.shape[3]:
        raise ShapeError("{} expects a square kernel, got {}".format(
            op_name, kernel.shape))
    if x.shape[1] != kernel.shape[in_axis]:
        raise ShapeError(
            "{} input has {} channels but kernel {} expects {}".format(
                op_name, x.shape[1], kernel.shape, kernel.shape[in_axis]
            )
        )
    if bias is not None and bias.shape != (kernel.shape[out_axis],):
        raise ShapeError(
            "{} bias shape {} does not match {} output channels".format(
                op_name, bias.shape, kernel.shape[out_axis]
            )
        )


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    # type: (Tensor, Tensor, Optional[Tensor], int, int) -> Tensor
    """Cross-correlate `x` [B,Cin,H,W] with `kernel` [Cout,Cin,K,K].

    Output spatial size is floor((H + 2*padding - K) / stride) + 1.
    """
    _check_conv_input(x, kernel, bias, 1, 0, "conv2d")
    k = kernel.shape[-1]
    _check_conv_args(k, stride, padding)
    for size in x.shape[2:]:
        if size + 2 * padding < k:
            raise ShapeError(
                "conv2d input {} with padding {} is smaller than kernel {}".format(
                    x.shape, padding, k
                )
            )
    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return Conv2d.apply(*inputs, stride=stride, padding=padding)


def conv_transpose2d(x, kernel, bias=None, stride=1, padding=0):
    # type: (Tensor, Tensor, Optional[Tensor], int, int) -> Tensor
    """Transposed convolution of `x` [B,Cin,H,W] with `kernel` [Cin,Cout,K,K].

    Output spatial size is (H - 1) * stride - 2 * padding + K.
    """
    _check_conv_input(x, kernel, bias, 0, 1, "conv_transpose2d")
    k = kernel.shape[-1]
    _check_conv_args(k, stride, padding)
    for size in x.shape[2:]:
        if conv_transpose_output_size(size, k, stride, padding) < 1:
            raise ShapeError(
                "conv_transpose2d padding {} leaves no output for input {}".format(
                    padding, x.shape
                )
            )
    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return ConvTranspose2d.apply(*inputs, stride=stride, padding=padding)


class RunningStats(object):
    """Per-channel running mean/variance used by batch norm in eval mode."""

    def __init__(self, channels):
        # type: (int) -> None
        self.mean = np.zeros(channels, dtype=DTYPE)
        self.var = np.ones(channels, dtype=DTYPE)

    def update(self, batch_mean, batch_var, count, momentum):
        # running variance tracks the unbiased estimate when it exists
        unbiased = batch_var * (count / float(count - 1)) if count > 1 else batch_var
        self.mean *= 1.0 - momentum
        self.mean += momentum * batch_mean
        self.var *= 1.0 - momentum
        self.var += momentum * unbiased.astype(DTYPE)


class BatchNorm(Function):
    def forward(self, x, gamma, beta, stats, mode, eps, momentum):
        axes = (0, 2, 3)
        count = x.shape[0] * x.shape[2] * x.shape[3]

        if mode is Mode.TRAIN:
            mean = x.mean(axis=axes, dtype=DTYPE)
            centered = x - mean.reshape(1, -1, 1, 1)
            var = (centered * centered).mean(axis=axes, dtype=DTYPE)
            stats.update(mean, var, count, momentum)
        else:
            centered = x - stats.mean.reshape(1, -1, 1, 1)
            var = stats.var

        self.mode = mode
        self.count = count
        self.gamma = gamma
        self.inv_std = (1.0 / np.sqrt(var + DTYPE(eps))).astype(DTYPE)
        self.x_hat = centered * self.inv_std.reshape(1, -1, 1, 1)
        return self.x_hat * gamma.reshape(1, -1, 1, 1) + beta.reshape(1, -1, 1, 1)

    def backward(self, grad):
        axes = (0, 2, 3)
        grad_gamma = (grad * self.x_hat).sum(axis=axes)
        grad_beta = grad.sum(axis=axes)
        grad_x_hat = grad * self.gamma.reshape(1, -1, 1, 1)
        inv_std = self.inv_std.reshape(1, -1, 1, 1)

        if self.mode is Mode.EVAL:
            return grad_x_hat * inv_std, grad_gamma, grad_beta

        sum_g = grad_x_hat.sum(axis=axes).reshape(1, -1, 1, 1)
        sum_gx = (grad_x_hat * self.x_hat).sum(axis=axes).reshape(1, -1, 1, 1)
        grad_x = (inv_std / self.count) * (
            self.count * grad_x_hat - sum_g - self.x_hat * sum_gx
        )
        return grad_x, grad_gamma, grad_beta


def batch_norm(
    x,
    gamma,
    beta,
    running_stats,
    mode=Mode.TRAIN,
    eps=BATCH_NORM_EPS,
    momentum=BATCH_NORM_MOMENTUM,
):
    # type: (Tensor, Tensor, Tensor, RunningStats, Mode, float, float) -> Tensor
    """Per-channel normalization over (B, H, W) followed by gamma/beta.

    Train mode uses batch statistics and folds them into `running_stats`
    with an exponential moving average; eval mode uses `running_stats`.
    """
    if len(x.shape) != 4:
        raise ShapeError("batch_norm expects a 4-d input, got {}".format(x.shape))
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(
            "batch_norm gamma/beta {} / {} do not match {} channels".format(
                gamma.shape, beta.shape, channels
            )
        )
    if eps <= 0:
        raise ValueError("batch_norm eps must be positive")
    return BatchNorm.apply(
        x,
        gamma,
        beta,
        stats=running_stats,
        mode=mode,
        eps=eps,
        momentum=momentum,
    )


class LeakyRelu(Function):
    def forward(self, x, slope):
        self.slope_mask = np.where(x > 0, DTYPE(1.0), DTYPE(slope)).astype(DTYPE)
        return x * self.slope_mask

    def backward(self, grad):
        return grad * self.slope_mask


def leaky_relu(x, slope=0.2):
    # type: (Tensor, float) -> Tensor
    """max(x, slope * x); the gradient at exactly 0 is `slope`."""
    if not 0.0 <= slope < 1.0:
        raise ValueError("leaky_relu slope must be in [0, 1), got {}".format(slope))
    return LeakyRelu.apply(x, slope=slope)


class Tanh(Function):
    def forward(self, x):
        self.y = np.clip(np.tanh(x), -_BELOW_ONE, _BELOW_ONE)
        return self.y

    def backward(self, grad):
        return grad * (1.0 - self.y * self.y)


def tanh(x):
    # type: (Tensor) -> Tensor
    """Elementwise tanh, kept strictly inside (-1, 1) at float32 precision."""
    return Tanh.apply(x)


class Sigmoid(Function):
    def forward(self, x):
        positive = x >= 0
        z = np.exp(-np.abs(x))
        y = np.where(positive, 1.0 / (1.0 + z), z / (1.0 + z)).astype(DTYPE)
        self.y = np.clip(y, _ABOVE_ZERO, _BELOW_ONE)
        return self.y

    def backward(self, grad):
        return grad * self.y * (1.0 - self.y)


def sigmoid(x):
    # type: (Tensor) -> Tensor
    return Sigmoid.apply(x)


class Dropout(Function):
    def forward(self, x, mask):
        self.mask = mask
        return x * mask

    def backward(self, grad):
        return grad * self.mask


def dropout(x, rate, mode=Mode.TRAIN, rng=None):
    # type: (Tensor, float, Mode, Optional[np.random.Generator]) -> Tensor
    """Inverted dropout: survivors are scaled by 1 / (1 - rate) in train mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1), got {}".format(rate))
    if mode is Mode.EVAL or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs a seeded generator")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(DTYPE) * DTYPE(1.0 / (1.0 - rate))
    return Dropout.apply(x, mask=mask)


class ConcatChannels(Function):
    def forward(self, a, b):
        self.split = a.shape[1]
        return np.concatenate([a, b], axis=1)

    def backward(self, grad):
        return grad[:, : self.split], grad[:, self.split :]


def concat_channels(a, b):
    # type: (Tensor, Tensor) -> Tensor
    if len(a.shape) != 4 or len(b.shape) != 4:
        raise ShapeError("concat_channels expects 4-d inputs")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(
            "concat_channels batch/spatial mismatch: {} vs {}".format(
                a.shape, b.shape
            )
        )
    return ConcatChannels.apply(a, b)


class SliceChannels(Function):
    def forward(self, x, start, stop):
        self.in_shape = x.shape
        self.start, self.stop = start, stop
        return x[:, start:stop]

    def backward(self, grad):
        out = np.zeros(self.in_shape, dtype=DTYPE)
        out[:, self.start : self.stop] = grad
        return out


def slice_channels(x, start, stop):
    # type: (Tensor, int, int) -> Tensor
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(
            "channel slice [{}, {}) out of range for {}".format(start, stop, x.shape)
        )
    return SliceChannels.apply(x, start=start, stop=stop)
