"""
Tests for model assembly, layer accounting and DYNM checkpoints.
"""

import numpy as np
import pytest

from dcmnet.errors import CheckpointError, ConfigError
from dcmnet.model import (
    DCMNet,
    ModelConfig,
    build_model,
    decode_checkpoint,
    encode_checkpoint,
    layer_details,
    layer_table,
    load_checkpoint,
    model_cost,
    preset,
    save_checkpoint,
)
from dcmnet.numerics import Tape, Tensor, mul, total
from dcmnet.routing import RoutingConfig

HOUSTON_ROWS = [
    ("PCA (HSI Preprocessing)", "HSI: (144, 11, 11)", "(30, 11, 11)", "PCA projection"),
    (
        "3D Conv1 (HSI Feature Extraction)",
        "(1, 30, 11, 11)",
        "(8, 22, 9, 9)",
        "3D CNN (9x3x3, stride=1, padding=0)",
    ),
    (
        "3D Conv2 (HSI Feature Extraction)",
        "(8, 22, 9, 9)",
        "(16, 16, 7, 7)",
        "3D CNN (7x3x3, stride=1, padding=0)",
    ),
    (
        "3D Conv3 (HSI Feature Extraction)",
        "(16, 16, 7, 7)",
        "(32, 12, 5, 5)",
        "3D CNN (5x3x3, stride=1, padding=0)",
    ),
    (
        "2D Conv1 (LiDAR Feature Extraction)",
        "LiDAR: (1, 11, 11)",
        "(64, 9, 9)",
        "2D CNN (3x3, stride=1, padding=0)",
    ),
    (
        "2D Conv2 (LiDAR Feature Extraction)",
        "(64, 9, 9)",
        "(128, 7, 7)",
        "2D CNN (3x3, stride=1, padding=0)",
    ),
    (
        "2D Conv3 (LiDAR Feature Extraction)",
        "(128, 7, 7)",
        "(128, 3, 3)",
        "2D CNN (5x5, stride=1, padding=0)",
    ),
    (
        "Projector (Input to Routing Space)",
        "(C, P, P)",
        "(128, 3, 3)",
        "2D CNN ((P-2)x(P-2), stride=1, padding=0)",
    ),
    ("Router (Feature Interactive Blocks Routing)", "(128, 3, 3)", "(256, 256)", "N/A"),
    ("BSAB (Bilinear Spatial Attention Block)", "(128, 3, 3), (128, 3, 3)", "(128, 3, 3)", "N/A"),
    ("BCAB (Bilinear Channel Attention Block)", "(128, 3, 3), (128, 3, 3)", "(128, 3, 3)", "N/A"),
    ("ICB (Integration Convolutional Block)", "(128, 3, 3), (128, 3, 3)", "(128, 3, 3)", "N/A"),
    ("Aggregation Layer (Final Output)", "(128, 3, 3)", "15", "N/A"),
]


def _houston_closed_form() -> int:
    encoders = 656 + 8080 + 23072 + 640 + 73856 + 409728
    projectors = 128 * (
        (176 * 49 + 1) + (256 * 25 + 1) + (384 * 9 + 1) + (64 * 49 + 1) + (128 * 25 + 1) + (128 + 1)
    )
    blocks = 3 * 3 * 128 * (1152 + 1)
    attention = 3 * 2 * 6 * (81 + 9)
    gates = 3 * 3 * (256 * (1152 + 1) + 3 * 257)
    head = 15 * 1153
    return encoders + projectors + blocks + attention + gates + head


def _grid_config(tiny_config: ModelConfig) -> ModelConfig:
    return tiny_config.replace(channels=8)


class TestModelConfig:
    def test_replace_routes_routing_fields(self):
        config = preset("desk").replace(layers=2, patch_size=9)
        assert config.routing.layers == 2
        assert config.patch_size == 9
        assert config.routing.channels == 16

    def test_from_dict_layers_over_base(self):
        config = ModelConfig.from_dict({"num_classes": 4, "routing": {"size": 2}}, base=preset("desk"))
        assert config.num_classes == 4
        assert config.routing.size == 2
        assert config.routing.channels == 16
        assert config.bands == 20

    def test_dict_round_trip(self):
        config = preset("desk").replace(enabled_blocks=("BCAB", "ICB"))
        assert ModelConfig.from_dict(config.to_dict()) == config

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({"depth": 3})

    def test_components_bounded_by_bands(self):
        with pytest.raises(ConfigError):
            ModelConfig(bands=10, components=12)

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="houston2013"):
            preset("trento")


class TestLayerTable:
    def test_houston_table(self):
        rows = layer_table(preset("houston2013"))
        assert [(r.name, r.input, r.output, r.kernel) for r in rows] == HOUSTON_ROWS

    def test_projector_row_sums_every_projector(self):
        config = preset("houston2013")
        rows = {r.name: r for r in layer_table(config)}
        projectors = [r for r in layer_details(config) if r.name.startswith("Projector")]
        assert [r.name for r in projectors] == [
            "Projector HSI-1", "Projector HSI-2", "Projector HSI-3",
            "Projector LiDAR-1", "Projector LiDAR-2", "Projector LiDAR-3",
        ]
        assert {r.output for r in projectors} == {"(128, 3, 3)"}
        assert rows["Projector (Input to Routing Space)"].params == sum(r.params for r in projectors)

    def test_details_break_down_routing_rows(self):
        config = preset("houston2013")
        rows = {r.name.split()[0]: r for r in layer_table(config)}
        details = {r.name: r for r in layer_details(config) if not r.name.startswith("Projector")}
        assert details["Router"].kernel == "FC 1152x256, FC 256x3 (x9)"
        assert details["ICB"].kernel == "2D CNN (3x3, stride=1, padding=1)"
        for name, row in details.items():
            assert (row.params, row.flops) == (rows[name].params, rows[name].flops)

    def test_router_row_only_when_soft(self):
        config = preset("houston2013").replace(router_mode="uniform_average")
        names = [r.name for r in layer_table(config)]
        assert not any(n.startswith("Router") for n in names)
        assert names[-1] == "Aggregation Layer (Final Output)"

    def test_single_layer_projector_kernel(self):
        config = preset("houston2013").replace(size=1, layers=1)
        row = next(r for r in layer_table(config) if r.name.startswith("Projector"))
        assert row.kernel == "2D CNN (PxP, stride=1, padding=0)"
        assert row.output == "(128, 1, 1)"

    def test_houston_parameter_count(self):
        model = build_model(preset("houston2013"))
        expected = _houston_closed_form()
        assert model.parameter_count() == expected
        assert model_cost(preset("houston2013"))["param_count"] == expected

    def test_table_matches_model_for_every_router(self, tiny_config):
        for routing in (
            RoutingConfig(channels=4, size=3, gate_hidden=8),
            RoutingConfig(channels=4, size=3, gate_hidden=8, router_mode="uniform_average"),
            RoutingConfig(channels=4, size=3, gate_hidden=8, layers=1, enabled_blocks=("BSAB",)),
        ):
            config = tiny_config.replace(routing=routing)
            assert build_model(config).parameter_count() == model_cost(config)["param_count"]

    def test_router_ablations_are_smaller(self):
        base = preset("houston2013")
        full = model_cost(base)["param_count"]
        uniform = model_cost(base.replace(router_mode="uniform_average"))["param_count"]
        plain = model_cost(base.replace(router_mode="off", enabled_blocks=("ICB",)))["param_count"]
        assert plain < uniform < full

    def test_flops_positive(self):
        assert model_cost(preset("desk"))["flops_per_sample"] > 0


class TestForward:
    def test_logits_shape(self, tiny_config):
        model = build_model(tiny_config)
        rng = np.random.default_rng(0)
        out = model(rng.normal(size=(4, 7, 7)), rng.normal(size=(1, 7, 7)))
        assert out.logits.shape == (3,)

    def test_batched_matches_single(self, tiny_config):
        model = build_model(tiny_config)
        rng = np.random.default_rng(1)
        hsi, lidar = rng.normal(size=(3, 4, 7, 7)), rng.normal(size=(3, 1, 7, 7))
        batched = model(hsi, lidar).logits.data
        for n in range(3):
            np.testing.assert_allclose(batched[n], model(hsi[n], lidar[n]).logits.data, atol=1e-12)

    def test_same_seed_same_weights(self, tiny_config):
        a, b = build_model(tiny_config, seed=4), build_model(tiny_config, seed=4)
        for name, tensor in a.named_parameters().items():
            np.testing.assert_array_equal(tensor.data, b.named_parameters()[name].data)

    def test_single_layer_skips_shallow_projectors(self, tiny_config):
        model = build_model(tiny_config.replace(layers=1))
        assert list(model.used_levels) == [3]
        assert not any("projector1." in n or "projector2." in n for n in model.named_parameters())

    @pytest.mark.parametrize("seed", range(3))
    def test_gradient_sampled_entries(self, tiny_config, seed):
        _check_model_gradient(_grid_config(tiny_config), seed, per_tensor=2)

    @pytest.mark.slow
    @pytest.mark.parametrize("seed", range(3))
    def test_gradient_every_entry(self, tiny_config, seed):
        _check_model_gradient(_grid_config(tiny_config), seed, per_tensor=None)


def _check_model_gradient(config: ModelConfig, seed: int, per_tensor: int | None, h: float = 1e-5):
    model = build_model(config, seed=seed)
    rng = np.random.default_rng(seed)
    hsi = rng.normal(size=(config.components, config.patch_size, config.patch_size))
    lidar = rng.normal(size=(1, config.patch_size, config.patch_size))
    weights = Tensor(rng.normal(size=config.num_classes))

    def loss(tape=None):
        return total(mul(model(hsi, lidar, tape).logits, weights, tape), tape)

    tape = Tape()
    tape.backward(loss(tape))
    for name, tensor in model.named_parameters().items():
        analytic = np.zeros(tensor.shape) if tensor.grad is None else tensor.grad
        indices = list(np.ndindex(tensor.shape))
        if per_tensor is not None:
            picks = rng.choice(len(indices), size=min(per_tensor, len(indices)), replace=False)
            indices = [indices[i] for i in picks]
        original = tensor.data.copy()
        for index in indices:
            shifted = original.copy()
            shifted[index] += h
            tensor.assign(shifted)
            plus = loss().item()
            shifted[index] -= 2 * h
            tensor.assign(shifted)
            minus = loss().item()
            tensor.assign(original)
            numeric = (plus - minus) / (2 * h)
            error = abs(analytic[index] - numeric) / max(abs(analytic[index]), abs(numeric), 1e-6)
            assert error <= 1e-4, f"{name}{index}: analytic {analytic[index]}, numeric {numeric}"


class TestCheckpoint:
    @pytest.fixture
    def trained_like(self, tiny_config, tiny_prepared):
        model = build_model(tiny_config, seed=2)
        model.preprocessor = tiny_prepared.preprocessor
        return model

    def test_round_trip_is_bit_exact(self, trained_like, tmp_path):
        path = save_checkpoint(trained_like, tmp_path / "model.dynm")
        loaded = load_checkpoint(path)
        assert isinstance(loaded, DCMNet)
        assert loaded.config == trained_like.config
        for name, tensor in trained_like.named_parameters().items():
            np.testing.assert_array_equal(loaded.named_parameters()[name].data, tensor.data)
        np.testing.assert_array_equal(
            loaded.preprocessor.pca.components, trained_like.preprocessor.pca.components
        )
        np.testing.assert_array_equal(
            loaded.preprocessor.standardizer.lidar_std, trained_like.preprocessor.standardizer.lidar_std
        )
        assert encode_checkpoint(loaded) == path.read_bytes()

    def test_without_preprocessor(self, tiny_config):
        loaded = decode_checkpoint(encode_checkpoint(build_model(tiny_config)))
        assert loaded.preprocessor is None

    def test_bad_magic(self, trained_like):
        raw = encode_checkpoint(trained_like)
        with pytest.raises(CheckpointError, match="not a DYNM"):
            decode_checkpoint(b"DYNF" + raw[4:])

    def test_version(self, trained_like):
        raw = bytearray(encode_checkpoint(trained_like))
        raw[4:6] = (9).to_bytes(2, "little")
        with pytest.raises(CheckpointError, match="version"):
            decode_checkpoint(bytes(raw))

    def test_truncated(self, trained_like):
        raw = encode_checkpoint(trained_like)
        with pytest.raises(CheckpointError, match="truncated"):
            decode_checkpoint(raw[:-3])

    def test_tensor_name_not_utf8(self, tiny_config):
        raw = bytearray(encode_checkpoint(build_model(tiny_config)))
        header_length = int.from_bytes(raw[6:10], "little")
        first_name = 10 + header_length + 2
        raw[first_name : first_name + 2] = b"\xff\xfe"
        with pytest.raises(CheckpointError, match="not UTF-8"):
            decode_checkpoint(bytes(raw))

    def test_non_finite_payload(self, tiny_config):
        raw = bytearray(encode_checkpoint(build_model(tiny_config)))
        raw[-8:] = np.array([np.nan], dtype="<f8").tobytes()
        with pytest.raises(CheckpointError):
            decode_checkpoint(bytes(raw))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "absent.dynm")
