import os

import numpy as np
import pytest

from sfr.errors import EmptyPyramidError, FeatureFormatError, InvalidFeatureError
from sfr.features import (FeatureMatrix, GlobalFeature, PyramidSpec, SpatialFeatureMap,
                          extract_features, global_average_pool, global_average_pool_backward,
                          l2_normalize_columns, load_feature_map, load_features, load_pooled,
                          pyramid_pool, pyramid_pool_backward, save_feature_map, save_pooled)
from sfr.oracle import window_oracle


def test_pyramid_count():
    fmap = SpatialFeatureMap(np.random.default_rng(0).standard_normal((3, 8, 4)))
    matrix = pyramid_pool(fmap)

    assert matrix.count == 70, matrix
    assert matrix.dim == 3, matrix
    assert PyramidSpec().count(8, 4) == 70


def test_pyramid_single_pixel():
    matrix = pyramid_pool(SpatialFeatureMap(np.ones((2, 1, 1))))

    assert matrix.count == 1, matrix
    assert np.all(matrix.columns == 1)


def test_pyramid_order():
    values = np.arange(12, dtype=np.float64).reshape(1, 3, 4)
    matrix = pyramid_pool(SpatialFeatureMap(values), PyramidSpec((1, 2)))

    # 12 single pixels row-major, then 2x3 windows of size 2
    assert matrix.count == 12 + 6, matrix
    assert list(matrix.columns[0, :12]) == list(range(12))
    assert matrix.columns[0, 12] == np.mean([0, 1, 4, 5])
    assert matrix.columns[0, 13] == np.mean([1, 2, 5, 6])
    assert matrix.columns[0, 15] == np.mean([4, 5, 8, 9])


def test_pyramid_matches_loops():
    fmap = SpatialFeatureMap(np.random.default_rng(1).standard_normal((4, 7, 5)))
    matrix = pyramid_pool(fmap)

    assert np.allclose(matrix.columns, window_oracle(fmap.values), atol=1e-12)


def test_pyramid_skips_large_kernels():
    matrix = pyramid_pool(SpatialFeatureMap(np.ones((1, 2, 6))))

    assert matrix.count == 12 + 5, matrix

    with pytest.raises(EmptyPyramidError):
        pyramid_pool(SpatialFeatureMap(np.ones((1, 1, 5))), PyramidSpec((2, 3)))


def test_pyramid_spec_validation():
    with pytest.raises(InvalidFeatureError):
        PyramidSpec(())
    with pytest.raises(InvalidFeatureError):
        PyramidSpec((2, 1))
    with pytest.raises(InvalidFeatureError):
        PyramidSpec((1, 2), stride=0)


def test_global_average_pool():
    values = np.arange(24, dtype=np.float64).reshape(2, 3, 4)
    g = global_average_pool(SpatialFeatureMap(values))

    assert g.dim == 2
    assert np.allclose(g.values, [5.5, 17.5]), g.values


def test_pooling_adjoints():
    rng = np.random.default_rng(2)
    values = rng.standard_normal((3, 6, 5))
    spec = PyramidSpec((1, 2, 3), stride=2)

    grad = rng.standard_normal((3, spec.count(6, 5)))
    lhs = np.sum(pyramid_pool(values, spec).columns * grad)
    rhs = np.sum(values * pyramid_pool_backward(grad, 6, 5, spec))
    assert abs(lhs - rhs) < 1e-10, (lhs, rhs)

    grad = rng.standard_normal(3)
    lhs = np.dot(global_average_pool(values).values, grad)
    rhs = np.sum(values * global_average_pool_backward(grad, 6, 5))
    assert abs(lhs - rhs) < 1e-10, (lhs, rhs)


def test_normalize_degenerate():
    m = l2_normalize_columns([[3.0, 0.0, 1.0], [4.0, 0.0, 0.0]])

    assert m.normalized and m.degenerate == (1,), m
    assert np.allclose(m.columns, [[0.6, 0.0, 1.0], [0.8, 0.0, 0.0]])


def test_feature_validation():
    with pytest.raises(InvalidFeatureError):
        FeatureMatrix([[2.0]], normalized=True)
    with pytest.raises(InvalidFeatureError):
        FeatureMatrix([[np.nan]])
    with pytest.raises(InvalidFeatureError):
        GlobalFeature([])
    with pytest.raises(InvalidFeatureError):
        SpatialFeatureMap(np.ones((2, 0, 3)))


def test_feature_map_file(tmp_path):
    fmap = SpatialFeatureMap(np.random.default_rng(3).standard_normal((16, 8, 4)))
    path = str(tmp_path / 'map.sfrf')
    save_feature_map(fmap, path)

    assert os.path.getsize(path) == 20 + 4 * 16 * 8 * 4
    loaded = load_feature_map(path)
    assert loaded.shape == (16, 8, 4)
    assert loaded.values.dtype == fmap.values.dtype == np.float32
    assert np.array_equal(loaded.values, fmap.values)


def test_feature_map_keeps_binary32():
    fmap = SpatialFeatureMap([[[0.1, 1e-3]]])

    assert fmap.values[0, 0, 0] == np.float32(0.1)
    with pytest.raises(InvalidFeatureError):
        SpatialFeatureMap([[[1e39]]])


def test_feature_map_malformed(tmp_path):
    path = tmp_path / 'bad.sfrf'

    path.write_bytes(b'NOPE' + bytes(16))
    with pytest.raises(FeatureFormatError):
        load_feature_map(str(path))

    save_feature_map(SpatialFeatureMap(np.ones((1, 2, 2))), str(path))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(FeatureFormatError):
        load_feature_map(str(path))

    path.write_bytes(b'SF')
    with pytest.raises(FeatureFormatError):
        load_feature_map(str(path))


def test_pooled_container(tmp_path):
    fmap = SpatialFeatureMap(np.random.default_rng(4).standard_normal((5, 4, 3)))
    g, m = extract_features(fmap)
    path = str(tmp_path / 'pooled.sfrf')
    save_pooled(g, m, path)

    g2, m2 = load_pooled(path)
    assert m2.normalized and m2.count == m.count, m2
    assert np.allclose(m2.columns, m.columns, atol=1e-6)
    assert np.allclose(g2.values, g.values, atol=1e-6)


def test_load_features_either_version(tmp_path):
    fmap = SpatialFeatureMap(np.random.default_rng(5).uniform(size=(2, 3, 3)))
    map_path, pooled_path = str(tmp_path / 'map.sfrf'), str(tmp_path / 'pooled.sfrf')
    save_feature_map(fmap, map_path)
    save_pooled(*extract_features(fmap, normalize=False), pooled_path)

    for path in (map_path, pooled_path):
        g, m = load_features(path, normalize=True)
        assert m.normalized and m.count == 9 + 4 + 1, (path, m)
        assert np.allclose(g.values, fmap.values.mean(axis=(1, 2)), atol=1e-6)
