"""
Tests for the HSI/LiDAR encoders and the routing-space projectors.
"""

import numpy as np
import pytest

from dcmnet.encoders import (
    build_encoder_spec,
    encode_hsi,
    encode_lidar,
    init_encoder_params,
    project,
)
from dcmnet.errors import ConfigError, ShapeError
from dcmnet.model import preset
from dcmnet.numerics import (
    Tape,
    Tensor,
    add,
    finite_diff_grad,
    mul,
    relative_error,
    rng_stream,
    total,
)


@pytest.fixture(scope="module")
def houston():
    config = preset("houston2013")
    encoder, projector = build_encoder_spec(config)
    params = init_encoder_params(encoder, projector, rng_stream(0, "init"))
    return config, encoder, projector, params


def test_houston_hsi_levels(houston):
    _, encoder, _, params = houston
    patch = Tensor(np.random.default_rng(0).normal(size=(30, 11, 11)))
    levels = encode_hsi(patch, encoder, params)
    assert [level.shape for level in levels] == [(8, 22, 9, 9), (16, 16, 7, 7), (32, 12, 5, 5)]
    assert [spec.kernel for spec in encoder.hsi_layers] == [(9, 3, 3), (7, 3, 3), (5, 3, 3)]


def test_houston_lidar_levels(houston):
    _, encoder, _, params = houston
    patch = Tensor(np.random.default_rng(1).normal(size=(1, 11, 11)))
    levels = encode_lidar(patch, encoder, params)
    assert [level.shape for level in levels] == [(64, 9, 9), (128, 7, 7), (128, 3, 3)]
    assert [spec.kernel for spec in encoder.lidar_layers] == [(3, 3), (3, 3), (5, 5)]


def test_every_projected_level_is_routing_grid(houston):
    _, encoder, projector, params = houston
    rng = np.random.default_rng(2)
    levels_h = encode_hsi(Tensor(rng.normal(size=(30, 11, 11))), encoder, params)
    levels_l = encode_lidar(Tensor(rng.normal(size=(1, 11, 11))), encoder, params)
    for level in (1, 2, 3):
        assert project(levels_h[level - 1], level, "hsi", projector, params).shape == (128, 3, 3)
        assert project(levels_l[level - 1], level, "lidar", projector, params).shape == (128, 3, 3)


def test_projector_kernel_rule(houston):
    _, _, projector, _ = houston
    for stream in ("hsi", "lidar"):
        for level in (1, 2, 3):
            spec = projector.level(stream, level)
            extent = spec.input_shape[-1]
            assert spec.kernel == (extent - 2, extent - 2)


def test_hsi_projector_merges_depth_into_channels(houston):
    _, _, projector, _ = houston
    assert projector.level("hsi", 1).input_shape == (8 * 22, 9, 9)


def test_batched_encoding_matches_single(houston):
    _, encoder, _, params = houston
    batch = np.random.default_rng(3).normal(size=(2, 1, 11, 11))
    batched = encode_lidar(Tensor(batch), encoder, params)[-1].data
    single = encode_lidar(Tensor(batch[1]), encoder, params)[-1].data
    np.testing.assert_allclose(batched[1], single, atol=1e-12)


@pytest.mark.parametrize("patch_size", [5, 8])
def test_rejects_bad_patch_size(patch_size):
    with pytest.raises(ConfigError):
        build_encoder_spec(preset("desk").replace(patch_size=patch_size))


def test_rejects_grid_larger_than_levels():
    with pytest.raises(ConfigError):
        build_encoder_spec(preset("desk").replace(patch_size=7, size=8))


def test_small_patch_shrinks_kernels():
    encoder, projector = build_encoder_spec(preset("desk").replace(patch_size=7, components=4))
    assert encoder.hsi_layers[0].kernel == (4, 3, 3)
    assert encoder.lidar_layers[2].kernel == (1, 1)
    assert projector.level("lidar", 3).output_shape[1:] == (3, 3)


def test_wrong_input_shape(houston):
    _, encoder, _, params = houston
    with pytest.raises(ShapeError):
        encode_hsi(Tensor(np.zeros((20, 11, 11))), encoder, params)


def test_unknown_stream(houston):
    _, _, projector, _ = houston
    with pytest.raises(ConfigError):
        projector.level("radar", 1)


@pytest.mark.parametrize("stream", ["hsi", "lidar"])
def test_gradient_through_all_levels(tiny_config, stream):
    encoder, projector = build_encoder_spec(tiny_config)
    params = init_encoder_params(encoder, projector, rng_stream(1, "init"))
    rng = np.random.default_rng(4)
    shape = (tiny_config.components, 7, 7) if stream == "hsi" else (1, 7, 7)
    x = rng.normal(size=shape)
    encode = encode_hsi if stream == "hsi" else encode_lidar
    level_weights = [Tensor(rng.normal(size=spec.output_shape)) for spec in getattr(encoder, f"{stream}_layers")]

    def weighted_loss(t, tape=None):
        levels = encode(t, encoder, params, tape)
        terms = [total(mul(level, weight, tape), tape) for level, weight in zip(levels, level_weights, strict=True)]
        return add(add(terms[0], terms[1], tape), terms[2], tape)

    tape = Tape()
    inp = Tensor(x, requires_grad=True)
    tape.backward(weighted_loss(inp, tape))
    numeric = finite_diff_grad(weighted_loss, x).data
    assert relative_error(inp.grad, numeric) <= 1e-6
