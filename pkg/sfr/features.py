import logging
import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from sfr.errors import (DimensionMismatchError, EmptyPyramidError,
                        FeatureFormatError, InvalidFeatureError)

logger = logging.getLogger(__name__)

MAGIC = b'SFRF'
MAP_VERSION = 1
POOLED_VERSION = 2
CHECKPOINT_VERSION = 3

HEADER = struct.Struct('<4sI')
TRIPLE = struct.Struct('<III')
FLOAT = np.dtype('<f4')

NORM_TOL = 1e-6
NORMALIZED_FLAG = 1


def _readonly(values, dtype=None):
    arr = np.array(values, dtype=dtype, copy=True)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SpatialFeatureMap:
    values: np.ndarray

    def __post_init__(self):
        values = _readonly(self.values, dtype=FLOAT)
        if values.ndim != 3 or min(values.shape) < 1:
            raise InvalidFeatureError(f'feature map must be a non-empty C x H x W grid, got shape {values.shape}')
        if not np.all(np.isfinite(values)):
            raise InvalidFeatureError('feature map holds non-finite values')
        object.__setattr__(self, 'values', values)

    @classmethod
    def from_flat(cls, channels, height, width, values):
        values = np.asarray(values)
        if values.size != channels * height * width:
            raise InvalidFeatureError(f'{values.size} values cannot fill a {channels}x{height}x{width} map')
        return cls(values.reshape(channels, height, width))

    @property
    def channels(self):
        return self.values.shape[0]

    @property
    def height(self):
        return self.values.shape[1]

    @property
    def width(self):
        return self.values.shape[2]

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        return f'SpatialFeatureMap({self.channels}x{self.height}x{self.width})'


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """d x count matrix, one spatial feature per column."""
    columns: np.ndarray
    normalized: bool = False
    degenerate: tuple = ()

    def __post_init__(self):
        columns = _readonly(self.columns, dtype=np.float64)
        if columns.ndim != 2 or columns.shape[0] < 1 or columns.shape[1] < 1:
            raise InvalidFeatureError(f'feature matrix must be d x count with d > 0 and count >= 1, got {columns.shape}')
        if not np.all(np.isfinite(columns)):
            raise InvalidFeatureError('feature matrix holds non-finite values')
        degenerate = tuple(int(i) for i in self.degenerate)
        if self.normalized:
            norms = np.linalg.norm(columns, axis=0)
            live = np.ones(columns.shape[1], dtype=bool)
            live[list(degenerate)] = False
            if np.any(norms[~live] != 0):
                raise InvalidFeatureError('degenerate columns must be zero')
            if np.any(np.abs(norms[live] - 1) > NORM_TOL):
                raise InvalidFeatureError('normalized matrix has columns off the unit sphere')
        object.__setattr__(self, 'columns', columns)
        object.__setattr__(self, 'degenerate', degenerate)

    @property
    def dim(self):
        return self.columns.shape[0]

    @property
    def count(self):
        return self.columns.shape[1]

    def __repr__(self):
        return f'FeatureMatrix(dim={self.dim}, count={self.count}, normalized={self.normalized})'


@dataclass(frozen=True, eq=False)
class GlobalFeature:
    values: np.ndarray

    def __post_init__(self):
        values = _readonly(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size < 1:
            raise InvalidFeatureError(f'global feature must be a non-empty vector, got shape {values.shape}')
        if not np.all(np.isfinite(values)):
            raise InvalidFeatureError('global feature holds non-finite values')
        object.__setattr__(self, 'values', values)

    @property
    def dim(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class PyramidSpec:
    kernel_sizes: tuple = (1, 2, 3, 4)
    stride: int = 1

    def __post_init__(self):
        kernels = tuple(int(k) for k in self.kernel_sizes)
        if not kernels:
            raise InvalidFeatureError('pyramid needs at least one kernel size')
        if kernels[0] < 1 or any(b <= a for a, b in zip(kernels, kernels[1:])):
            raise InvalidFeatureError(f'kernel sizes must be positive and strictly increasing, got {kernels}')
        if int(self.stride) < 1:
            raise InvalidFeatureError(f'stride must be positive, got {self.stride}')
        object.__setattr__(self, 'kernel_sizes', kernels)
        object.__setattr__(self, 'stride', int(self.stride))

    def fitting(self, height, width):
        return [k for k in self.kernel_sizes if k <= min(height, width)]

    def windows(self, height, width, kernel):
        s = self.stride
        return (height - kernel) // s + 1, (width - kernel) // s + 1

    def count(self, height, width):
        total = 0
        for k in self.fitting(height, width):
            rows, cols = self.windows(height, width, k)
            total += rows * cols
        return total


def as_columns(m):
    if isinstance(m, FeatureMatrix):
        return m.columns
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise DimensionMismatchError(f'expected a d x count matrix, got shape {arr.shape}')
    return arr


def _read_header(data, path):
    if len(data) < HEADER.size:
        raise FeatureFormatError(f'{path}: truncated header ({len(data)} bytes)')
    magic, version = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FeatureFormatError(f'{path}: bad magic {magic!r}')
    return version


def _read_triple(data, path):
    if len(data) < HEADER.size + TRIPLE.size:
        raise FeatureFormatError(f'{path}: truncated header ({len(data)} bytes)')
    return TRIPLE.unpack_from(data, HEADER.size)


def _read_floats(payload, expected, path):
    if len(payload) != expected * FLOAT.itemsize:
        raise FeatureFormatError(f'{path}: header declares {expected} values but payload holds '
                                 f'{len(payload) / FLOAT.itemsize:g}')
    values = np.frombuffer(payload, dtype=FLOAT).astype(np.float32)
    if not np.all(np.isfinite(values)):
        raise FeatureFormatError(f'{path}: non-finite value in payload')
    return values


def _as_payload(values):
    payload = np.ascontiguousarray(values, dtype=FLOAT)
    if not np.all(np.isfinite(payload)):
        raise InvalidFeatureError('values overflow binary32')
    return payload.tobytes()


def read_version(path):
    with open(path, 'rb') as f:
        data = f.read(HEADER.size)
    return _read_header(data, path)


def load_feature_map(path):
    with open(path, 'rb') as f:
        data = f.read()

    version = _read_header(data, path)
    if version != MAP_VERSION:
        raise FeatureFormatError(f'{path}: expected feature map version {MAP_VERSION}, found {version}')

    channels, height, width = _read_triple(data, path)
    if min(channels, height, width) < 1:
        raise FeatureFormatError(f'{path}: empty map {channels}x{height}x{width}')

    values = _read_floats(data[HEADER.size + TRIPLE.size:], channels * height * width, path)
    return SpatialFeatureMap(values.reshape(channels, height, width))


def save_feature_map(fmap, path):
    payload = _as_payload(fmap.values)
    with open(path, 'wb') as f:
        f.write(HEADER.pack(MAGIC, MAP_VERSION))
        f.write(TRIPLE.pack(*fmap.shape))
        f.write(payload)


def save_pooled(global_feature, matrix, path):
    if global_feature.dim != matrix.dim:
        raise DimensionMismatchError(f'global dim {global_feature.dim} != spatial dim {matrix.dim}')
    flags = NORMALIZED_FLAG if matrix.normalized else 0
    with open(path, 'wb') as f:
        f.write(HEADER.pack(MAGIC, POOLED_VERSION))
        f.write(TRIPLE.pack(matrix.dim, matrix.count, flags))
        f.write(_as_payload(global_feature.values))
        # column outermost
        f.write(_as_payload(matrix.columns.T))


def load_pooled(path):
    with open(path, 'rb') as f:
        data = f.read()

    version = _read_header(data, path)
    if version != POOLED_VERSION:
        raise FeatureFormatError(f'{path}: expected pooled container version {POOLED_VERSION}, found {version}')

    dim, count, flags = _read_triple(data, path)
    if dim < 1 or count < 1:
        raise FeatureFormatError(f'{path}: empty container {dim}x{count}')

    values = _read_floats(data[HEADER.size + TRIPLE.size:], dim + dim * count, path)
    columns = values[dim:].reshape(count, dim).T.astype(np.float64)
    matrix = FeatureMatrix(columns)
    if flags & NORMALIZED_FLAG:
        matrix = l2_normalize_columns(matrix)
    return GlobalFeature(values[:dim]), matrix


def load_features(path, spec=None, normalize=False):
    """Global feature and spatial matrix from either a map or a pooled container."""
    version = read_version(path)
    if version == POOLED_VERSION:
        global_feature, matrix = load_pooled(path)
        if normalize and not matrix.normalized:
            matrix = l2_normalize_columns(matrix)
        return global_feature, matrix
    return extract_features(load_feature_map(path), spec, normalize)


def _map_values(fmap):
    values = fmap.values if isinstance(fmap, SpatialFeatureMap) else fmap
    return np.asarray(values, dtype=np.float64)


def global_average_pool(fmap):
    values = _map_values(fmap)
    return GlobalFeature(values.mean(axis=(1, 2)))


def global_average_pool_backward(grad, height, width):
    grad = np.asarray(grad, dtype=np.float64)
    return np.broadcast_to(grad[:, None, None] / (height * width),
                           (grad.shape[0], height, width)).copy()


def pyramid_pool(fmap, spec=None):
    spec = spec or PyramidSpec()
    values = _map_values(fmap)
    channels, height, width = values.shape
    s = spec.stride

    blocks = []
    for k in spec.kernel_sizes:
        if k > min(height, width):
            logger.debug('kernel %d skipped for %dx%d map', k, height, width)
            continue
        windows = sliding_window_view(values, (k, k), axis=(1, 2))[:, ::s, ::s]
        blocks.append(windows.mean(axis=(-2, -1)).reshape(channels, -1))

    if not blocks:
        raise EmptyPyramidError(f'no kernel of {spec.kernel_sizes} fits a {height}x{width} map')

    return FeatureMatrix(np.concatenate(blocks, axis=1))


def pyramid_pool_backward(grad, height, width, spec=None):
    """Adjoint of pyramid_pool: spreads each column gradient evenly over its window."""
    spec = spec or PyramidSpec()
    grad = as_columns(grad)
    channels = grad.shape[0]
    s = spec.stride
    out = np.zeros((channels, height, width))

    offset = 0
    for k in spec.fitting(height, width):
        rows, cols = spec.windows(height, width, k)
        block = grad[:, offset:offset + rows * cols].reshape(channels, rows, cols) / (k * k)
        offset += rows * cols
        for i in range(k):
            for j in range(k):
                out[:, i:i + s * (rows - 1) + 1:s, j:j + s * (cols - 1) + 1:s] += block

    if offset != grad.shape[1]:
        raise DimensionMismatchError(f'gradient has {grad.shape[1]} columns, pyramid produces {offset}')
    return out


def column_scales(columns):
    norms = np.linalg.norm(as_columns(columns), axis=0)
    return np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)


def l2_normalize_columns(m):
    columns = as_columns(m)
    norms = np.linalg.norm(columns, axis=0)
    normalized = np.divide(columns, norms, out=np.zeros_like(columns), where=norms > 0)
    degenerate = tuple(int(i) for i in np.flatnonzero(norms == 0))
    if degenerate:
        logger.debug('%d zero columns left unnormalized', len(degenerate))
    return FeatureMatrix(normalized, normalized=True, degenerate=degenerate)


def extract_features(fmap, spec=None, normalize=True):
    matrix = pyramid_pool(fmap, spec)
    if normalize:
        matrix = l2_normalize_columns(matrix)
    return global_average_pool(fmap), matrix
