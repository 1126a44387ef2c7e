import numpy as np
import pytest

from exuseg.errors import ConfigError, LayerError, ShapeError
from exuseg.gradcheck import MODEL_TOL, check_model_gradients
from exuseg.model import LayerSpec, Model, ModelConfig, default_config
from exuseg.tensor import Rng

from conftest import SMALL_CHANNELS, small_config


class TestModelConfig:
    def test_default_validates_with_expected_trace(self):
        trace = default_config().validate()
        spatial = [s[0] for s in trace if len(s) == 3]
        assert spatial[0] == 32
        assert 16 in spatial and 8 in spatial and 4 in spatial
        assert trace[-1] == (2,)
        # spatial size never changes except at the three pools
        assert spatial.count(32) > 0 and spatial[-1] == 4

    def test_flattened_width(self):
        cfg = default_config()
        dense = [s for s in cfg.layers if s.kind == "dense"][0]
        assert dense.in_features == 4 * 4 * 128
        assert dense.out_features == 2

    def test_conv_count_enforced(self):
        with pytest.raises(ConfigError, match="exactly 8"):
            default_config(conv_channels=(8, 8, 8, 8, 8, 8)).validate()

    def test_pool_placement_enforced(self):
        cfg = default_config(conv_channels=SMALL_CHANNELS)
        layers = list(cfg.layers)
        # move the first pool one block later: now pools follow convs 4,4,6
        first_pool = next(i for i, s in enumerate(layers) if s.kind == "maxpool2d")
        spec = layers.pop(first_pool)
        second_pool = next(i for i, s in enumerate(layers) if s.kind == "maxpool2d")
        layers.insert(second_pool, spec)
        bad = ModelConfig(layers=tuple(layers))
        with pytest.raises(ConfigError):
            bad.validate()

    def test_dense_width_mismatch(self):
        layers = [
            s if s.kind != "dense" else LayerSpec.dense(999, 2)
            for s in small_config().layers
        ]
        with pytest.raises(ConfigError):
            ModelConfig(layers=tuple(layers)).validate()

    def test_final_shape_enforced(self):
        layers = [
            s if s.kind != "dense" else LayerSpec.dense(s.in_features, 3)
            for s in small_config().layers
        ]
        with pytest.raises(ConfigError, match="final output"):
            ModelConfig(layers=tuple(layers)).validate()

    def test_dropout_probability_validated(self):
        with pytest.raises(ConfigError):
            default_config(dropout_p=1.0).validate()

    def test_json_round_trip(self):
        cfg = small_config()
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_spec_field_rejected(self):
        with pytest.raises(ConfigError):
            LayerSpec.from_dict({"kind": "conv2d", "bogus": 1})


class TestModel:
    def test_output_shape_for_any_batch(self):
        model = Model(small_config(), rng=Rng(1))
        for n in (1, 3, 7):
            x = Rng(n).uniform((n, 32, 32, 3))
            assert model.forward(x, training=False).shape == (n, 2)

    def test_infer_mode_is_pure(self):
        model = Model(small_config(), rng=Rng(1))
        x = Rng(5).uniform((2, 32, 32, 3))
        a = model.forward(x, training=False)
        b = model.forward(x, training=False)
        assert np.array_equal(a, b)

    def test_same_seed_identical_params(self):
        a = Model(small_config(), rng=Rng(3))
        b = Model(small_config(), rng=Rng(3))
        for (name_a, arr_a), (name_b, arr_b) in zip(a.state_items(),
                                                    b.state_items()):
            assert name_a == name_b
            assert np.array_equal(arr_a, arr_b)

    def test_batch_shape_checked(self):
        model = Model(small_config(), rng=Rng(1))
        with pytest.raises(ShapeError):
            model.forward(np.zeros((2, 16, 16, 3)))

    def test_layer_errors_carry_index(self):
        model = Model(small_config(), rng=Rng(1))
        model.layers[4].forward = lambda *a, **k: (_ for _ in ()).throw(
            RuntimeError("boom")
        )
        with pytest.raises(LayerError) as exc:
            model.forward(np.zeros((1, 32, 32, 3)), training=False)
        assert exc.value.layer_index == 4
        assert "layer 4" in str(exc.value)

    def test_dropout_needs_rng_in_training(self):
        model = Model(small_config(dropout_p=0.5), rng=Rng(1))
        x = Rng(2).uniform((2, 32, 32, 3))
        with pytest.raises(LayerError):
            model.forward(x, training=True)

    def test_state_round_trip(self):
        model = Model(small_config(), rng=Rng(1))
        state = {k: v.copy() for k, v in model.state_items()}
        other = Model(small_config(), rng=Rng(99))
        other.load_state(state)
        for (_, a), (_, b) in zip(model.state_items(), other.state_items()):
            assert np.array_equal(a, b)

    def test_load_state_missing_key(self):
        model = Model(small_config(), rng=Rng(1))
        state = {k: v for k, v in model.state_items()}
        state.pop(next(iter(state)))
        with pytest.raises(KeyError):
            Model(small_config(), rng=Rng(2)).load_state(state)


def test_end_to_end_gradients_match_finite_differences():
    model = Model(small_config(), rng=Rng(42))
    loss, results = check_model_gradients(model, Rng(99), batch=4,
                                          coords_per_tensor=6)
    assert np.isfinite(loss)
    parameterized = {r.name.split(".")[1] for r in results}
    assert parameterized == {"conv2d", "batchnorm2d", "dense"}
    # one row per parameterized layer: 8 convs + 8 bns + 1 dense
    assert len(results) == 17
    for res in results:
        assert res.error < MODEL_TOL, f"{res.name}: {res.error}"


def test_gradcheck_detects_corrupted_backward(monkeypatch):
    from exuseg import layers as L

    original = L.Dense.backward

    def corrupted(self, grad_out):
        grad_x = original(self, grad_out)
        self.grads["weight"] = self.grads["weight"] * 1.05
        return grad_x

    monkeypatch.setattr(L.Dense, "backward", corrupted)
    model = Model(small_config(), rng=Rng(42))
    _, results = check_model_gradients(model, Rng(99), coords_per_tensor=6)
    failed = [r for r in results if not r.passed]
    assert failed, "corrupted backward must be reported"
    assert all("dense" in r.name for r in failed)
    assert any(r.name.startswith("layer") for r in failed)  # carries the index
