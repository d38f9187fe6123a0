"""
Forward and backward primitives for dense, convolutional, max-pool,
batch-norm and dropout layers.

Each layer caches exactly the context its backward pass needs from the most
recent forward call. Backward methods take the error at the layer's output
(for dense/conv: at the pre-activation, i.e. already multiplied by f'(z)) and
return gradients as sums over the mini-batch; learning rate and sign belong to
the optimizer.
"""
import logging
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ArgumentError, DimensionError, StateError
from .randgen import glorot_uniform, splitmix64_stream, uniform01
from .tensor import default_dtype

logger = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0).astype(z.dtype, copy=False)


def relu_deriv(z: np.ndarray) -> np.ndarray:
    # H(0) = 0
    return (z > 0).astype(z.dtype)


def _pair(value) -> Tuple[int, int]:
    if isinstance(value, (list, tuple)):
        return int(value[0]), int(value[1])
    return int(value), int(value)


def conv_output_shape(in_shape: Sequence[int], out_channels: int, kernel, stride: int, padding: int) -> Tuple[int, int, int]:
    """floor((in + 2 * pad - k) / stride) + 1 per spatial dimension."""
    if len(in_shape) != 3:
        raise DimensionError('Conv input must be C x H x W', tuple(in_shape))
    _, height, width = in_shape
    kh, kw = _pair(kernel)
    padded_h, padded_w = height + 2 * padding, width + 2 * padding
    if kh > padded_h or kw > padded_w:
        raise DimensionError('Conv kernel larger than padded input', (kh, kw), (padded_h, padded_w))
    return out_channels, (padded_h - kh) // stride + 1, (padded_w - kw) // stride + 1


def pool_output_shape(in_shape: Sequence[int], window, stride: int) -> Tuple[int, int, int]:
    if len(in_shape) != 3:
        raise DimensionError('Pool input must be C x H x W', tuple(in_shape))
    channels, height, width = in_shape
    wh, ww = _pair(window)
    if height < wh or width < ww:
        raise DimensionError('Pool window larger than input', (wh, ww), (height, width))
    return channels, (height - wh) // stride + 1, (width - ww) // stride + 1


class DenseLayer:
    def __init__(self, W: np.ndarray, b: np.ndarray):
        if W.ndim != 2 or b.shape != (W.shape[0],):
            raise DimensionError('Dense layer needs W: N x M and b: N', W.shape, b.shape)
        self.W = W
        self.b = b
        self.x: Optional[np.ndarray] = None
        self.z: Optional[np.ndarray] = None

    @classmethod
    def glorot(cls, seed: int, in_features: int, out_features: int, dtype=None) -> 'DenseLayer':
        dtype = dtype or default_dtype()
        W = glorot_uniform(seed, in_features, out_features, out_features, in_features, dtype=dtype)
        return cls(W, np.zeros(out_features, dtype=dtype))

    @property
    def in_features(self) -> int:
        return self.W.shape[1]

    @property
    def out_features(self) -> int:
        return self.W.shape[0]

    def params(self) -> Dict[str, np.ndarray]:
        return {'W': self.W, 'b': self.b}

    def forward(self, x: np.ndarray, activate: bool = True) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise DimensionError('Dense input width does not match W', x.shape, self.W.shape)
        z = x @ self.W.T + self.b
        self.x = x
        self.z = z
        return relu(z) if activate else z

    def backward(
        self,
        e_y: np.ndarray,
        backward_weights: Optional[np.ndarray] = None,
        propagate: bool = True,
    ) -> Tuple[Optional[np.ndarray], Dict[str, np.ndarray]]:
        """
        Gradients for an error at the pre-activation.

        `backward_weights` (N x M) replaces W when propagating the error to the
        input; feedback alignment passes its fixed random matrix here.
        """
        if self.x is None:
            raise StateError('dense_backward called before dense_forward')
        if e_y.shape != (self.x.shape[0], self.out_features):
            raise DimensionError('Dense error does not match cached output', e_y.shape, self.z.shape)
        grads = {'W': e_y.T @ self.x, 'b': e_y.sum(axis=0)}
        e_x = None
        if propagate:
            weights = self.W if backward_weights is None else backward_weights
            e_x = e_y @ weights
        return e_x, grads

    def forward_macs(self, batch: int) -> int:
        return batch * self.in_features * self.out_features


def im2col(x: np.ndarray, kernel: Tuple[int, int], stride: int, padding: int) -> np.ndarray:
    """(B, C, H, W) -> (B * oH * oW, C * kH * kW) patch matrix."""
    kh, kw = kernel
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    batch, channels, out_h, out_w = windows.shape[:4]
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(batch * out_h * out_w, channels * kh * kw)


def col2im(
    cols: np.ndarray,
    x_shape: Sequence[int],
    kernel: Tuple[int, int],
    stride: int,
    padding: int,
    out_hw: Tuple[int, int],
) -> np.ndarray:
    """Scatter-add patch gradients back onto the (unpadded) input."""
    batch, channels, height, width = x_shape
    kh, kw = kernel
    out_h, out_w = out_hw
    patches = cols.reshape(batch, out_h, out_w, channels, kh, kw)
    padded = np.zeros((batch, channels, height + 2 * padding, width + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            padded[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += (
                patches[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if padding:
        return padded[:, :, padding:-padding, padding:-padding]
    return padded


class ConvLayer:
    def __init__(self, kernels: np.ndarray, b: np.ndarray, stride: int = 1, padding=0):
        if kernels.ndim != 4 or b.shape != (kernels.shape[0],):
            raise DimensionError('Conv layer needs kernels: O x I x kH x kW and b: O', kernels.shape, b.shape)
        if stride < 1:
            raise ArgumentError(f'Conv stride must be positive, got {stride}')
        self.kernels = kernels
        self.b = b
        self.stride = int(stride)
        self.padding = 0 if padding in (None, 'valid') else int(padding)
        self.cols: Optional[np.ndarray] = None
        self.x_shape: Optional[Tuple[int, ...]] = None
        self.z: Optional[np.ndarray] = None

    @classmethod
    def glorot(cls, seed: int, in_channels: int, out_channels: int, kernel, stride=1, padding=0, dtype=None):
        dtype = dtype or default_dtype()
        kh, kw = _pair(kernel)
        kernels = glorot_uniform(
            seed, in_channels * kh * kw, out_channels * kh * kw,
            out_channels, in_channels, kh, kw, dtype=dtype,
        )
        return cls(kernels, np.zeros(out_channels, dtype=dtype), stride=stride, padding=padding)

    @property
    def kernel_size(self) -> Tuple[int, int]:
        return self.kernels.shape[2], self.kernels.shape[3]

    @property
    def in_channels(self) -> int:
        return self.kernels.shape[1]

    @property
    def out_channels(self) -> int:
        return self.kernels.shape[0]

    def params(self) -> Dict[str, np.ndarray]:
        return {'kernels': self.kernels, 'b': self.b}

    def output_shape(self, in_shape: Sequence[int]) -> Tuple[int, int, int]:
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise DimensionError('Conv input channels do not match kernels', tuple(in_shape), self.kernels.shape)
        return conv_output_shape(in_shape, self.out_channels, self.kernel_size, self.stride, self.padding)

    def forward(self, x: np.ndarray, activate: bool = True) -> np.ndarray:
        if x.ndim != 4:
            raise DimensionError('Conv input must be B x C x H x W', x.shape)
        _, out_h, out_w = self.output_shape(x.shape[1:])
        cols = im2col(x, self.kernel_size, self.stride, self.padding)
        z = cols @ self.kernels.reshape(self.out_channels, -1).T + self.b
        z = np.ascontiguousarray(z.reshape(x.shape[0], out_h, out_w, self.out_channels).transpose(0, 3, 1, 2))
        self.cols = cols
        self.x_shape = x.shape
        self.z = z
        return relu(z) if activate else z

    def backward(
        self,
        e_y: np.ndarray,
        backward_kernels: Optional[np.ndarray] = None,
        propagate: bool = True,
    ) -> Tuple[Optional[np.ndarray], Dict[str, np.ndarray]]:
        """
        Full correlation for the kernel gradient, transposed convolution for the
        input error. `backward_kernels` (O x I x kH x kW) replaces the forward
        kernels in the transposed convolution.
        """
        if self.cols is None:
            raise StateError('conv_backward called before conv_forward')
        if e_y.shape != self.z.shape:
            raise DimensionError('Conv error does not match cached output', e_y.shape, self.z.shape)
        e_cols = e_y.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        grads = {
            'kernels': (e_cols.T @ self.cols).reshape(self.kernels.shape),
            'b': e_y.sum(axis=(0, 2, 3)),
        }
        e_x = None
        if propagate:
            kernels = self.kernels if backward_kernels is None else backward_kernels
            d_cols = e_cols @ kernels.reshape(self.out_channels, -1)
            e_x = col2im(d_cols, self.x_shape, self.kernel_size, self.stride, self.padding, e_y.shape[2:])
        return e_x, grads

    def forward_macs(self, batch: int, in_shape: Sequence[int]) -> int:
        out_channels, out_h, out_w = self.output_shape(in_shape)
        kh, kw = self.kernel_size
        return batch * out_h * out_w * out_channels * self.in_channels * kh * kw


class MaxPoolLayer:
    def __init__(self, window, stride: int):
        self.window = _pair(window)
        self.stride = int(stride)
        if self.stride < 1:
            raise ArgumentError(f'Pool stride must be positive, got {stride}')
        self.argmax: Optional[np.ndarray] = None
        self.input_shape: Optional[Tuple[int, ...]] = None

    def output_shape(self, in_shape: Sequence[int]) -> Tuple[int, int, int]:
        return pool_output_shape(in_shape, self.window, self.stride)

    def forward(self, x: np.ndarray) -> np.ndarray:
        batch, channels, height, width = x.shape
        _, out_h, out_w = self.output_shape(x.shape[1:])
        wh, ww = self.window
        windows = sliding_window_view(x, (wh, ww), axis=(2, 3))[:, :, ::self.stride, ::self.stride]
        windows = windows.reshape(batch, channels, out_h, out_w, wh * ww)
        # np.argmax returns the first maximum: ties go to the lowest flat index
        local = windows.argmax(axis=-1)
        y = np.take_along_axis(windows, local[..., None], axis=-1)[..., 0]
        rows = np.arange(out_h).reshape(1, 1, out_h, 1) * self.stride + local // ww
        cols = np.arange(out_w).reshape(1, 1, 1, out_w) * self.stride + local % ww
        self.argmax = rows * width + cols
        self.input_shape = x.shape
        return np.ascontiguousarray(y)

    def backward(self, e_out: np.ndarray) -> np.ndarray:
        if self.argmax is None:
            raise StateError('maxpool_backward called before maxpool_forward')
        if e_out.shape != self.argmax.shape:
            raise DimensionError('Pool error does not match cached output', e_out.shape, self.argmax.shape)
        batch, channels, height, width = self.input_shape
        plane = height * width
        offsets = (np.arange(batch * channels) * plane).reshape(batch, channels, 1, 1)
        routed = np.bincount(
            (offsets + self.argmax).ravel(),
            weights=e_out.ravel(),
            minlength=batch * channels * plane,
        )
        return routed.astype(e_out.dtype).reshape(self.input_shape)


class BatchNormLayer:
    """
    Batch normalization over features (dense input B x N) or feature maps
    (conv input B x C x H x W), with one scale and shift per neuron or map.
    """

    def __init__(self, num_features: int, shift: bool = True, eps: float = BN_EPS,
                 momentum: float = BN_MOMENTUM, dtype=None):
        if not 0.0 < momentum < 1.0:
            raise ArgumentError(f'Batch-norm momentum must lie in (0, 1), got {momentum}')
        dtype = dtype or default_dtype()
        self.gamma = np.ones(num_features, dtype=dtype)
        self.beta = np.zeros(num_features, dtype=dtype)
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)
        self.shift = shift
        self.eps = eps
        self.momentum = momentum
        self.x_hat: Optional[np.ndarray] = None
        self.inv_std: Optional[np.ndarray] = None

    def params(self) -> Dict[str, np.ndarray]:
        if self.shift:
            return {'gamma': self.gamma, 'beta': self.beta}
        return {'gamma': self.gamma}

    def buffers(self) -> Dict[str, np.ndarray]:
        return {'running_mean': self.running_mean, 'running_var': self.running_var}

    @staticmethod
    def _axes(x: np.ndarray) -> Tuple[int, ...]:
        return (0,) if x.ndim == 2 else (0, 2, 3)

    @staticmethod
    def _view(v: np.ndarray, x: np.ndarray) -> np.ndarray:
        return v if x.ndim == 2 else v.reshape(1, -1, 1, 1)

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        axes = self._axes(x)
        if training:
            count = x.size // x.shape[1]
            if count < 2:
                raise ArgumentError(
                    f'Batch normalization needs at least 2 values per feature in training, got {count}'
                )
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            x_hat = (x - self._view(mean, x)) * self._view(inv_std, x)
            self.running_mean[...] = self.momentum * self.running_mean + (1 - self.momentum) * mean
            self.running_var[...] = (
                self.momentum * self.running_var + (1 - self.momentum) * var * (count / (count - 1))
            )
            self.x_hat = x_hat.astype(x.dtype, copy=False)
            self.inv_std = inv_std.astype(x.dtype, copy=False)
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            x_hat = (x - self._view(self.running_mean, x)) * self._view(inv_std, x)
        y = self._view(self.gamma, x) * x_hat + self._view(self.beta, x)
        return y.astype(x.dtype, copy=False)

    def backward(self, e_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        if self.x_hat is None:
            raise StateError('batchnorm_backward called before a training forward pass')
        if e_out.shape != self.x_hat.shape:
            raise DimensionError('Batch-norm error does not match cached activations', e_out.shape, self.x_hat.shape)
        axes = self._axes(e_out)
        count = e_out.size // e_out.shape[1]
        grad_gamma = (e_out * self.x_hat).sum(axis=axes)
        grad_beta = e_out.sum(axis=axes)
        d_hat = e_out * self._view(self.gamma, e_out)
        e_in = (self._view(self.inv_std, e_out) / count) * (
            count * d_hat
            - self._view(d_hat.sum(axis=axes), e_out)
            - self.x_hat * self._view((d_hat * self.x_hat).sum(axis=axes), e_out)
        )
        return e_in.astype(e_out.dtype, copy=False), grad_gamma, grad_beta


class DropoutLayer:
    """Inverted dropout: kept units are scaled by 1 / (1 - p) at train time."""

    def __init__(self, p: float, seed: int):
        if not 0.0 <= p < 1.0:
            raise ArgumentError(f'Dropout probability must lie in [0, 1), got {p}')
        self.p = float(p)
        self.state = int(seed)
        self.mask: Optional[np.ndarray] = None

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        if not training:
            self.mask = None
            return x
        if self.p == 0.0:
            self.mask = np.ones_like(x)
            return x
        u, self.state = splitmix64_stream(self.state, x.size)
        keep = uniform01(u).reshape(x.shape) >= self.p
        self.mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - self.p))
        return x * self.mask

    def backward(self, e_out: np.ndarray) -> np.ndarray:
        if self.mask is None:
            raise StateError('dropout backward called without a training forward pass')
        return e_out * self.mask
