import numpy as np
import pytest

from sfr.encoder import (ConvLayer, EncoderParams, ToyImage, conv2d_valid, conv2d_valid_backward,
                         downsample, downsample_backward, encode, encode_backward, encode_values,
                         encoder_output_shape,
                         init_params, load_params, save_params, sgd_update)
from sfr.errors import DimensionMismatchError, FeatureFormatError, InvalidFeatureError
from sfr.features import SpatialFeatureMap, save_feature_map
from sfr.oracle import finite_difference
from sfr.toy import DEFAULT_ENCODER, TOY_HEIGHT, TOY_WIDTH


def test_conv_matches_loops():
    rng = np.random.default_rng(0)
    x, kernel, bias = rng.standard_normal((2, 5, 4)), rng.standard_normal((3, 2, 2, 2)), rng.standard_normal(3)
    out = conv2d_valid(x, kernel, bias)

    assert out.shape == (3, 4, 3), out.shape
    for o in range(3):
        for i in range(4):
            for j in range(3):
                expected = np.sum(x[:, i:i + 2, j:j + 2] * kernel[o]) + bias[o]
                assert abs(out[o, i, j] - expected) < 1e-12


def test_conv_backward_adjoint():
    rng = np.random.default_rng(1)
    x, kernel = rng.standard_normal((2, 6, 5)), rng.standard_normal((4, 2, 3, 3))
    grad_out = rng.standard_normal((4, 4, 3))
    grad_x, grad_kernel, grad_bias = conv2d_valid_backward(x, kernel, grad_out)

    assert abs(np.sum(conv2d_valid(x, kernel) * grad_out) - np.sum(x * grad_x)) < 1e-10
    assert abs(np.sum(conv2d_valid(x, kernel) * grad_out) - np.sum(kernel * grad_kernel)) < 1e-10
    assert np.allclose(grad_bias, grad_out.sum(axis=(1, 2)))


def test_downsample_floor():
    x = np.arange(15, dtype=np.float64).reshape(1, 3, 5)
    out = downsample(x)

    assert out.shape == (1, 1, 2), out.shape
    assert np.allclose(out, [[[3.0, 5.0]]])

    grad = np.random.default_rng(2).standard_normal(out.shape)
    assert abs(np.sum(out * grad) - np.sum(x * downsample_backward(grad, 3, 5))) < 1e-12


def test_output_shape():
    shape = encoder_output_shape(1, TOY_HEIGHT, TOY_WIDTH, DEFAULT_ENCODER)
    params = init_params(DEFAULT_ENCODER, seed=0)
    fmap = encode(ToyImage(np.full((TOY_HEIGHT, TOY_WIDTH), 0.5)), params)

    assert shape == (16, 6, 4), shape
    assert fmap.shape == shape, fmap

    with pytest.raises(DimensionMismatchError):
        encoder_output_shape(1, 5, 5, DEFAULT_ENCODER)


def test_backward_finite_difference():
    rng = np.random.default_rng(3)
    params = init_params([(2, 1, 3, True), (3, 2, 2, False)], seed=4)
    img = ToyImage(rng.uniform(size=(9, 8)))
    upstream = rng.standard_normal(encode_values(img, params).shape)
    grads = encode_backward(img, params, upstream)

    arrays = params.arrays()
    analytic = [g for pair in grads for g in pair]
    for n, (array, grad) in enumerate(zip(arrays, analytic)):
        def f(z, n=n):
            trial = list(arrays)
            trial[n] = z
            return float(np.sum(encode_values(img, params.with_arrays(trial)) * upstream))
        fd = finite_difference(f, array)
        assert np.max(np.abs(grad - fd)) <= 1e-4 * max(np.max(np.abs(fd)), 1e-8), n


def test_rectifier_at_zero():
    params = EncoderParams((ConvLayer(np.zeros((1, 1, 2, 2)), np.zeros(1)),))
    img = ToyImage(np.random.default_rng(5).uniform(size=(4, 4)))
    (grad_kernel, grad_bias), = encode_backward(img, params, np.ones((1, 3, 3)))

    assert not np.any(grad_kernel) and not np.any(grad_bias)


def test_zero_learning_rate():
    params = init_params(DEFAULT_ENCODER, seed=6)
    grads = [(np.ones_like(layer.kernel), np.ones_like(layer.bias)) for layer in params.layers]

    assert sgd_update(params, grads, 0.0) is params
    moved = sgd_update(params, grads, 0.1)
    assert np.allclose(moved.layers[0].kernel, params.layers[0].kernel - 0.1)


def test_params_checkpoint(tmp_path):
    params = init_params(DEFAULT_ENCODER, seed=7)
    path = str(tmp_path / 'encoder.sfrf')
    save_params(params, path)
    loaded = load_params(path)

    assert loaded.spec == [(8, 1, 3, True), (16, 8, 3, True)], loaded.spec
    assert loaded.num_parameters() == params.num_parameters() == 8 * 9 + 8 + 16 * 8 * 9 + 16
    for a, b in zip(loaded.arrays(), params.arrays()):
        assert np.allclose(a, b, atol=1e-6)

    save_feature_map(SpatialFeatureMap(np.ones((1, 2, 2))), path)
    with pytest.raises(FeatureFormatError):
        load_params(path)


def test_validation():
    with pytest.raises(InvalidFeatureError):
        ToyImage(np.full((4, 4), 1.5))
    with pytest.raises(InvalidFeatureError):
        ConvLayer(np.zeros((2, 1, 3, 3)), np.zeros(3))
    with pytest.raises(DimensionMismatchError):
        EncoderParams((ConvLayer(np.zeros((2, 1, 3, 3)), np.zeros(2)),
                       ConvLayer(np.zeros((2, 3, 3, 3)), np.zeros(2))))
