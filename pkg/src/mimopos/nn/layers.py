"""Neural network layers on numpy arrays.

Every layer consumes and produces arrays shaped (batch, height, width,
depth, channels); the three spatial axes map to the vertical-angle,
horizontal-angle and delay axes of a channel power tensor.  Convolutions
use odd kernels, stride one, centred zero padding and no bias term, so they
preserve spatial extent.  2-D networks are expressed with a unit third
axis.

Layers implement ``forward(x, train)`` and ``backward(grad)``; backward
returns the loss gradient with respect to the input and accumulates
parameter gradients in place (call ``zero_grad`` on the optimiser between
steps).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Parameter:
    """A trainable array with its gradient accumulator.

    ``decay`` marks parameters subject to L2 regularisation: convolution
    kernels and linear weights, but not biases or normalisation scales.
    """

    def __init__(self, value, name, decay=True):
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)
        self.name = name
        self.decay = decay

    @property
    def size(self):
        return self.value.size


class Layer:
    """Base class; subclasses override forward/backward."""

    name = "layer"

    def params(self):
        return []

    def buffers(self):
        """Non-trainable state to persist (e.g. running statistics)."""
        return []

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def output_shape(self, shape):
        """Map an input (H, W, D, C) shape to the output shape."""
        return tuple(shape)

    def __call__(self, x, train=False):
        return self.forward(x, train=train)


def _check_spatial(shape, x):
    if x.ndim != 5:
        raise ValueError("expected a (batch, H, W, D, C) array")


def _triple(size):
    if np.isscalar(size):
        return (int(size),) * 3
    size = tuple(int(s) for s in size)
    if len(size) != 3:
        raise ValueError("size must be a scalar or 3-tuple")
    return size


class Conv3D(Layer):
    """3-D convolution, stride 1, centred zero padding, no bias.

    Kernel axes are ordered (k1, k2, k3, in_channels, out_channels); all
    kernel extents must be odd so the padding keeps input and output
    aligned.  Weights start uniform in +-1/sqrt(fan_in).
    """

    def __init__(self, in_channels, out_channels, kernel_size, rng,
                 dtype=np.float32, name="conv"):
        self.kernel_size = _triple(kernel_size)
        if any(k < 1 or k % 2 == 0 for k in self.kernel_size):
            raise ValueError(f"{name}: kernel extents must be odd, "
                             f"got {self.kernel_size}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.name = name
        fan_in = int(np.prod(self.kernel_size)) * in_channels
        bound = 1.0 / np.sqrt(fan_in)
        shape = self.kernel_size + (in_channels, out_channels)
        self.kernel = Parameter(
            rng.uniform(-bound, bound, size=shape).astype(dtype),
            name=f"{name}.kernel", decay=True)

    def params(self):
        return [self.kernel]

    def output_shape(self, shape):
        h, w, d, c = shape
        if c != self.in_channels:
            raise ValueError(f"{self.name}: expected {self.in_channels} "
                             f"input channels, got {c}")
        for extent, k in zip((h, w, d), self.kernel_size):
            if k > extent:
                raise ValueError(f"{self.name}: kernel {self.kernel_size} "
                                 f"exceeds input extent {(h, w, d)}")
        return (h, w, d, self.out_channels)

    def _pad(self, x):
        p1, p2, p3 = (k // 2 for k in self.kernel_size)
        return np.pad(x, ((0, 0), (p1, p1), (p2, p2), (p3, p3), (0, 0)))

    def forward(self, x, train=False):
        _check_spatial(None, x)
        self.output_shape(x.shape[1:])
        windows = sliding_window_view(self._pad(x), self.kernel_size,
                                      axis=(1, 2, 3))
        self._windows = windows
        # windows: (B, H, W, D, C, k1, k2, k3); contract C and kernel axes
        return np.tensordot(windows, self.kernel.value,
                            axes=([4, 5, 6, 7], [3, 0, 1, 2]))

    def backward(self, grad):
        gk = np.tensordot(self._windows, grad,
                          axes=([0, 1, 2, 3], [0, 1, 2, 3]))
        self.kernel.grad += gk.transpose(1, 2, 3, 0, 4).astype(
            self.kernel.grad.dtype, copy=False)
        # input gradient: correlate grad with the spatially flipped kernel,
        # swapping the channel axes
        flipped = np.flip(self.kernel.value, axis=(0, 1, 2))
        flipped = flipped.transpose(0, 1, 2, 4, 3)
        p1, p2, p3 = (k // 2 for k in self.kernel_size)
        gp = np.pad(grad, ((0, 0), (p1, p1), (p2, p2), (p3, p3), (0, 0)))
        windows = sliding_window_view(gp, self.kernel_size, axis=(1, 2, 3))
        return np.tensordot(windows, flipped, axes=([4, 5, 6, 7], [3, 0, 1, 2]))


class ReLU(Layer):
    """Rectifier; the subgradient at exactly zero is taken as zero."""

    def __init__(self, name="relu"):
        self.name = name

    def forward(self, x, train=False):
        self._mask = x > 0
        return np.where(self._mask, x, 0)

    def backward(self, grad):
        return np.where(self._mask, grad, 0)


class BatchNorm3D(Layer):
    """Per-channel batch normalisation over batch and spatial axes.

    Training mode normalises with batch statistics and blends them into the
    running estimates (``running = momentum * running + (1-momentum) *
    batch``); inference mode normalises with the running estimates.  The
    backward pass is only defined for training mode.
    """

    def __init__(self, n_channels, momentum=0.9, eps=1e-5,
                 dtype=np.float32, name="bn"):
        self.n_channels = n_channels
        self.momentum = momentum
        self.eps = eps
        self.name = name
        self.gamma = Parameter(np.ones(n_channels, dtype=dtype),
                               name=f"{name}.gamma", decay=False)
        self.beta = Parameter(np.zeros(n_channels, dtype=dtype),
                              name=f"{name}.beta", decay=False)
        self.running_mean = np.zeros(n_channels, dtype=dtype)
        self.running_var = np.ones(n_channels, dtype=dtype)

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [(f"{self.name}.running_mean", self.running_mean),
                (f"{self.name}.running_var", self.running_var)]

    def output_shape(self, shape):
        if shape[-1] != self.n_channels:
            raise ValueError(f"{self.name}: expected {self.n_channels} "
                             f"channels, got {shape[-1]}")
        return tuple(shape)

    def forward(self, x, train=False):
        _check_spatial(None, x)
        self._train = train
        if train:
            mean = x.mean(axis=(0, 1, 2, 3))
            var = x.var(axis=(0, 1, 2, 3))
            self.running_mean = (self.momentum * self.running_mean
                                 + (1 - self.momentum) * mean).astype(
                self.running_mean.dtype, copy=False)
            self.running_var = (self.momentum * self.running_var
                                + (1 - self.momentum) * var).astype(
                self.running_var.dtype, copy=False)
        else:
            mean = self.running_mean
            var = self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv
        if train:
            self._xhat = xhat
            self._inv = inv
        return xhat * self.gamma.value + self.beta.value

    def backward(self, grad):
        if not self._train:
            raise RuntimeError(f"{self.name}: backward undefined in "
                               "inference mode")
        xhat = self._xhat
        axes = (0, 1, 2, 3)
        n = xhat.size // xhat.shape[-1]
        self.gamma.grad += (grad * xhat).sum(axis=axes).astype(
            self.gamma.grad.dtype, copy=False)
        self.beta.grad += grad.sum(axis=axes).astype(
            self.beta.grad.dtype, copy=False)
        g_mean = grad.mean(axis=axes)
        gx_mean = (grad * xhat).mean(axis=axes)
        return self.gamma.value * self._inv * (grad - g_mean - xhat * gx_mean)


class MaxPool3D(Layer):
    """Max pooling with floor output sizing.

    Output extent per axis is (in - size) // stride + 1; trailing positions
    that do not fill a window are dropped.  Ties inside a window resolve to
    the first element in scan order.
    """

    def __init__(self, size, stride=None, name="maxpool"):
        self.size = _triple(size)
        self.stride = _triple(stride) if stride is not None else self.size
        if any(s < 1 for s in self.size) or any(s < 1 for s in self.stride):
            raise ValueError(f"{name}: size and stride must be positive")
        self.name = name

    def output_shape(self, shape):
        h, w, d, c = shape
        out = []
        for extent, s, t in zip((h, w, d), self.size, self.stride):
            if s > extent:
                raise ValueError(f"{self.name}: window {self.size} exceeds "
                                 f"input extent {(h, w, d)}")
            out.append((extent - s) // t + 1)
        return (*out, c)

    def forward(self, x, train=False):
        _check_spatial(None, x)
        self.output_shape(x.shape[1:])
        s1, s2, s3 = self.size
        t1, t2, t3 = self.stride
        windows = sliding_window_view(x, self.size, axis=(1, 2, 3))
        windows = windows[:, ::t1, ::t2, ::t3]
        flat = windows.reshape(windows.shape[:5] + (s1 * s2 * s3,))
        self._argmax = flat.argmax(axis=-1)
        self._in_shape = x.shape
        return np.take_along_axis(flat, self._argmax[..., None], -1)[..., 0]

    def backward(self, grad):
        s1, s2, s3 = self.size
        t1, t2, t3 = self.stride
        b, oh, ow, od, c = grad.shape
        bi, hi, wi, di, ci = np.indices((b, oh, ow, od, c), sparse=True)
        arg = self._argmax
        o1 = arg // (s2 * s3)
        o2 = (arg // s3) % s2
        o3 = arg % s3
        gx = np.zeros(self._in_shape, dtype=grad.dtype)
        np.add.at(gx, (bi, hi * t1 + o1, wi * t2 + o2, di * t3 + o3, ci), grad)
        return gx


class AvgPool3D(Layer):
    """Average pooling; optional centred zero padding for stride-1 use.

    The divisor is always the full window volume, also over padded borders.
    """

    def __init__(self, size, stride=None, pad=False, name="avgpool"):
        self.size = _triple(size)
        self.stride = _triple(stride) if stride is not None else self.size
        if pad and any(s % 2 == 0 for s in self.size):
            raise ValueError(f"{name}: padded pooling needs odd windows")
        self.pad = pad
        self.name = name

    def _pads(self):
        if not self.pad:
            return 0, 0, 0
        return tuple(s // 2 for s in self.size)

    def output_shape(self, shape):
        h, w, d, c = shape
        p = self._pads()
        out = []
        for extent, s, t, pi in zip((h, w, d), self.size, self.stride, p):
            padded = extent + 2 * pi
            if s > padded:
                raise ValueError(f"{self.name}: window {self.size} exceeds "
                                 f"input extent {(h, w, d)}")
            out.append((padded - s) // t + 1)
        return (*out, c)

    def forward(self, x, train=False):
        _check_spatial(None, x)
        self.output_shape(x.shape[1:])
        p1, p2, p3 = self._pads()
        t1, t2, t3 = self.stride
        self._in_shape = x.shape
        xp = np.pad(x, ((0, 0), (p1, p1), (p2, p2), (p3, p3), (0, 0)))
        self._padded_shape = xp.shape
        windows = sliding_window_view(xp, self.size, axis=(1, 2, 3))
        windows = windows[:, ::t1, ::t2, ::t3]
        return windows.mean(axis=(-3, -2, -1))

    def backward(self, grad):
        t1, t2, t3 = self.stride
        p1, p2, p3 = self._pads()
        vol = int(np.prod(self.size))
        share = grad / vol
        gp = np.zeros(self._padded_shape, dtype=grad.dtype)
        oh, ow, od = grad.shape[1:4]
        for i in range(self.size[0]):
            for j in range(self.size[1]):
                for k in range(self.size[2]):
                    gp[:,
                       i:i + (oh - 1) * t1 + 1:t1,
                       j:j + (ow - 1) * t2 + 1:t2,
                       k:k + (od - 1) * t3 + 1:t3] += share
        h, w, d = self._in_shape[1:4]
        return gp[:, p1:p1 + h, p2:p2 + w, p3:p3 + d]


class GlobalAvgPool(Layer):
    """Mean over all spatial positions; outputs (batch, channels)."""

    def __init__(self, name="gap"):
        self.name = name

    def output_shape(self, shape):
        return (shape[-1],)

    def forward(self, x, train=False):
        _check_spatial(None, x)
        self._in_shape = x.shape
        return x.mean(axis=(1, 2, 3))

    def backward(self, grad):
        b, h, w, d, c = self._in_shape
        share = grad / (h * w * d)
        return np.broadcast_to(share[:, None, None, None, :],
                               self._in_shape).copy()


class Linear(Layer):
    """Fully connected layer on (batch, features) arrays."""

    def __init__(self, in_features, out_features, rng, dtype=np.float32,
                 name="linear"):
        self.in_features = in_features
        self.out_features = out_features
        self.name = name
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Parameter(
            rng.uniform(-bound, bound, size=(in_features, out_features))
            .astype(dtype), name=f"{name}.weight", decay=True)
        self.bias = Parameter(np.zeros(out_features, dtype=dtype),
                              name=f"{name}.bias", decay=False)

    def params(self):
        return [self.weight, self.bias]

    def output_shape(self, shape):
        if shape != (self.in_features,):
            raise ValueError(f"{self.name}: expected ({self.in_features},) "
                             f"features, got {shape}")
        return (self.out_features,)

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ValueError(f"{self.name}: expected (batch, "
                             f"{self.in_features}) input, got {x.shape}")
        self._x = x
        return x @ self.weight.value + self.bias.value

    def backward(self, grad):
        self.weight.grad += (self._x.T @ grad).astype(
            self.weight.grad.dtype, copy=False)
        self.bias.grad += grad.sum(axis=0).astype(
            self.bias.grad.dtype, copy=False)
        return grad @ self.weight.value.T


def concat_channels(arrays):
    """Concatenate along the channel axis; spatial shapes must agree."""
    shapes = {a.shape[:-1] for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"spatial shapes differ across branches: "
                         f"{sorted(shapes)}")
    return np.concatenate(arrays, axis=-1)


def split_channels(grad, sizes):
    """Inverse of :func:`concat_channels` for the backward pass."""
    if sum(sizes) != grad.shape[-1]:
        raise ValueError("channel sizes do not sum to the gradient width")
    edges = np.cumsum(sizes)[:-1]
    return np.split(grad, edges, axis=-1)


class Sequential(Layer):
    """Chain of layers applied in order."""

    def __init__(self, layers, name="seq"):
        self.layers = list(layers)
        self.name = name

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def buffers(self):
        return [b for layer in self.layers for b in layer.buffers()]

    def output_shape(self, shape):
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


class Parallel(Layer):
    """Run branches on a shared input and concatenate their channels."""

    def __init__(self, branches, name="parallel"):
        self.branches = list(branches)
        self.name = name

    def params(self):
        return [p for br in self.branches for p in br.params()]

    def buffers(self):
        return [b for br in self.branches for b in br.buffers()]

    def output_shape(self, shape):
        outs = [br.output_shape(shape) for br in self.branches]
        spatial = {o[:-1] for o in outs}
        if len(spatial) != 1:
            raise ValueError(f"{self.name}: branch spatial shapes differ: "
                             f"{sorted(spatial)}")
        return outs[0][:-1] + (sum(o[-1] for o in outs),)

    def forward(self, x, train=False):
        outs = [br.forward(x, train=train) for br in self.branches]
        self._sizes = [o.shape[-1] for o in outs]
        return concat_channels(outs)

    def backward(self, grad):
        pieces = split_channels(grad, self._sizes)
        total = None
        for br, piece in zip(self.branches, pieces):
            g = br.backward(piece)
            total = g if total is None else total + g
        return total
