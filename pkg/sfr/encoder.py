import logging
import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from sfr.errors import DimensionMismatchError, FeatureFormatError, InvalidFeatureError
from sfr.features import (CHECKPOINT_VERSION, FLOAT, HEADER, MAGIC, SpatialFeatureMap,
                          _as_payload, _read_header)

logger = logging.getLogger(__name__)

COUNT = struct.Struct('<I')
LAYER = struct.Struct('<IIII')


@dataclass(frozen=True, eq=False)
class ToyImage:
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim == 2:
            values = values[None]
        if values.ndim != 3 or min(values.shape) < 1:
            raise InvalidFeatureError(f'image must be C x H x W, got shape {values.shape}')
        if not np.all(np.isfinite(values)) or values.min() < 0 or values.max() > 1:
            raise InvalidFeatureError('pixel values must be finite and within [0, 1]')
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    @property
    def channels(self):
        return self.values.shape[0]

    @property
    def height(self):
        return self.values.shape[1]

    @property
    def width(self):
        return self.values.shape[2]


@dataclass(frozen=True, eq=False)
class ConvLayer:
    kernel: np.ndarray
    bias: np.ndarray
    downsample: bool = False

    def __post_init__(self):
        kernel = np.array(self.kernel, dtype=np.float64)
        bias = np.array(self.bias, dtype=np.float64)
        if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
            raise InvalidFeatureError(f'kernel must be outC x inC x k x k, got {kernel.shape}')
        if bias.shape != (kernel.shape[0],):
            raise InvalidFeatureError(f'bias shape {bias.shape} does not match {kernel.shape[0]} output channels')
        if not (np.all(np.isfinite(kernel)) and np.all(np.isfinite(bias))):
            raise InvalidFeatureError('layer parameters must be finite')
        kernel.setflags(write=False)
        bias.setflags(write=False)
        object.__setattr__(self, 'kernel', kernel)
        object.__setattr__(self, 'bias', bias)
        object.__setattr__(self, 'downsample', bool(self.downsample))

    @property
    def out_channels(self):
        return self.kernel.shape[0]

    @property
    def in_channels(self):
        return self.kernel.shape[1]

    @property
    def size(self):
        return self.kernel.shape[2]

    @property
    def spec(self):
        return self.out_channels, self.in_channels, self.size, self.downsample


@dataclass(frozen=True, eq=False)
class EncoderParams:
    layers: tuple = ()
    seed: int = None

    def __post_init__(self):
        layers = tuple(self.layers)
        for prev, layer in zip(layers, layers[1:]):
            if prev.out_channels != layer.in_channels:
                raise DimensionMismatchError(f'layer chain broken: {prev.out_channels} channels out, '
                                             f'{layer.in_channels} expected in')
        object.__setattr__(self, 'layers', layers)

    @property
    def spec(self):
        return [layer.spec for layer in self.layers]

    def arrays(self):
        out = []
        for layer in self.layers:
            out.extend([layer.kernel, layer.bias])
        return out

    def with_arrays(self, arrays):
        layers = [ConvLayer(arrays[2 * i], arrays[2 * i + 1], layer.downsample)
                  for i, layer in enumerate(self.layers)]
        return EncoderParams(tuple(layers), self.seed)

    def num_parameters(self):
        return sum(a.size for a in self.arrays())


def init_params(spec, seed=0):
    """spec: list of (out_channels, in_channels, kernel_size, downsample)."""
    rng = np.random.default_rng(seed)
    layers = []
    for out_c, in_c, k, down in spec:
        if min(out_c, in_c, k) < 1:
            raise InvalidFeatureError(f'bad layer shape {(out_c, in_c, k)}')
        kernel = rng.standard_normal((out_c, in_c, k, k)) / np.sqrt(in_c * k * k)
        layers.append(ConvLayer(kernel, np.zeros(out_c), down))
    return EncoderParams(tuple(layers), seed)


def encoder_output_shape(channels, height, width, spec):
    for out_c, in_c, k, down in spec:
        if in_c != channels:
            raise DimensionMismatchError(f'layer expects {in_c} input channels, got {channels}')
        height, width = height - k + 1, width - k + 1
        if down:
            height, width = height // 2, width // 2
        if height < 1 or width < 1:
            raise DimensionMismatchError('input smaller than the encoder receptive field')
        channels = out_c
    return channels, height, width


def conv2d_valid(x, kernel, bias=None):
    k = kernel.shape[2]
    if x.shape[0] != kernel.shape[1]:
        raise DimensionMismatchError(f'conv expects {kernel.shape[1]} channels, got {x.shape[0]}')
    if x.shape[1] < k or x.shape[2] < k:
        raise DimensionMismatchError(f'{x.shape[1]}x{x.shape[2]} input smaller than {k}x{k} kernel')
    windows = sliding_window_view(x, (k, k), axis=(1, 2))
    out = np.tensordot(windows, kernel, axes=([0, 3, 4], [1, 2, 3])).transpose(2, 0, 1)
    if bias is not None:
        out = out + bias[:, None, None]
    return out


def conv2d_valid_backward(x, kernel, grad_out):
    k = kernel.shape[2]
    windows = sliding_window_view(x, (k, k), axis=(1, 2))
    grad_kernel = np.tensordot(grad_out, windows, axes=([1, 2], [1, 2]))
    grad_bias = grad_out.sum(axis=(1, 2))

    padded = np.pad(grad_out, ((0, 0), (k - 1, k - 1), (k - 1, k - 1)))
    spread = sliding_window_view(padded, (k, k), axis=(1, 2))
    grad_x = np.tensordot(spread, kernel[:, :, ::-1, ::-1], axes=([0, 3, 4], [0, 2, 3])).transpose(2, 0, 1)
    return grad_x, grad_kernel, grad_bias


def downsample(x):
    c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 < 1 or w2 < 1:
        raise DimensionMismatchError(f'cannot downsample a {h}x{w} map')
    return x[:, :2 * h2, :2 * w2].reshape(c, h2, 2, w2, 2).mean(axis=(2, 4))


def downsample_backward(grad, height, width):
    out = np.zeros((grad.shape[0], height, width))
    h2, w2 = grad.shape[1], grad.shape[2]
    out[:, :2 * h2, :2 * w2] = np.repeat(np.repeat(grad, 2, axis=1), 2, axis=2) / 4
    return out


def _forward(img, params):
    x = img.values if isinstance(img, ToyImage) else np.asarray(img, dtype=np.float64)
    caches = []
    for layer in params.layers:
        pre = conv2d_valid(x, layer.kernel, layer.bias)
        active = np.maximum(pre, 0)
        out = downsample(active) if layer.downsample else active
        caches.append((x, pre))
        x = out
    return x, caches


def encode_values(img, params):
    """Full-precision output grid; training and gradient checks work on this."""
    out, _ = _forward(img, params)
    return out


def encode(img, params):
    return SpatialFeatureMap(encode_values(img, params))


def encode_backward(img, params, upstream):
    """Parameter gradients as a list of (grad_kernel, grad_bias), one per layer."""
    out, caches = _forward(img, params)
    grad = np.asarray(upstream, dtype=np.float64)
    if grad.shape != out.shape:
        raise DimensionMismatchError(f'upstream gradient shape {grad.shape} != output shape {out.shape}')

    grads = []
    for layer, (x, pre) in zip(reversed(params.layers), reversed(caches)):
        if layer.downsample:
            grad = downsample_backward(grad, pre.shape[1], pre.shape[2])
        grad = grad * (pre > 0)  # subgradient 0 at exactly 0
        grad, grad_kernel, grad_bias = conv2d_valid_backward(x, layer.kernel, grad)
        grads.append((grad_kernel, grad_bias))

    return grads[::-1]


def sgd_update(params, grads, learning_rate):
    if learning_rate == 0:
        return params
    layers = [ConvLayer(layer.kernel - learning_rate * gk, layer.bias - learning_rate * gb, layer.downsample)
              for layer, (gk, gb) in zip(params.layers, grads)]
    return EncoderParams(tuple(layers), params.seed)


def save_params(params, path):
    with open(path, 'wb') as f:
        f.write(HEADER.pack(MAGIC, CHECKPOINT_VERSION))
        f.write(COUNT.pack(len(params.layers)))
        for layer in params.layers:
            f.write(LAYER.pack(layer.out_channels, layer.in_channels, layer.size, int(layer.downsample)))
        for layer in params.layers:
            f.write(_as_payload(layer.kernel))
        for layer in params.layers:
            f.write(_as_payload(layer.bias))


def load_params(path):
    with open(path, 'rb') as f:
        data = f.read()

    version = _read_header(data, path)
    if version != CHECKPOINT_VERSION:
        raise FeatureFormatError(f'{path}: expected checkpoint version {CHECKPOINT_VERSION}, found {version}')

    offset = HEADER.size
    if len(data) < offset + COUNT.size:
        raise FeatureFormatError(f'{path}: truncated layer manifest')
    (count,) = COUNT.unpack_from(data, offset)
    offset += COUNT.size
    if len(data) < offset + count * LAYER.size:
        raise FeatureFormatError(f'{path}: truncated layer manifest')

    spec = []
    for _ in range(count):
        spec.append(LAYER.unpack_from(data, offset))
        offset += LAYER.size

    sizes = [o * i * k * k for o, i, k, _ in spec] + [o for o, _, _, _ in spec]
    payload = data[offset:]
    if len(payload) != sum(sizes) * FLOAT.itemsize:
        raise FeatureFormatError(f'{path}: manifest declares {sum(sizes)} parameters but payload holds '
                                 f'{len(payload) / FLOAT.itemsize:g}')
    values = np.frombuffer(payload, dtype=FLOAT).astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise FeatureFormatError(f'{path}: non-finite parameter')

    chunks = np.split(values, np.cumsum(sizes)[:-1]) if sizes else []
    layers = []
    for n, (o, i, k, down) in enumerate(spec):
        layers.append(ConvLayer(chunks[n].reshape(o, i, k, k), chunks[count + n], bool(down)))
    return EncoderParams(tuple(layers), None)
