import json

import numpy as np
import pytest
from sklearn.base import clone

from mimopos.network import (CNNLocalizer, Network, NetworkSpec, load_network,
                             save_network, train_network)

TINY_3D = dict(branch_channels=2, merge_channels=4, inception_base=2)


def tiny_3d_spec(seed=0):
    return NetworkSpec(kind="cnn3d", input_shape=(4, 8, 32), seed=seed,
                       **TINY_3D)


def make_batch(rng, n=10, shape=(4, 8, 32)):
    X = rng.uniform(0.1, 1.0, size=(n,) + shape)
    y = rng.uniform(-5.0, 5.0, size=(n, 3))
    return X, y


class TestSpec:
    def test_round_trip_through_dict(self):
        spec = tiny_3d_spec()
        again = NetworkSpec.from_dict(spec.to_dict())
        assert again == spec

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            NetworkSpec(kind="mlp", input_shape=(4, 4, 4))

    def test_scaled_2d_quarter_size(self):
        spec = NetworkSpec.scaled_2d(32, 32)
        assert spec.kind == "cnn2d"
        assert spec.input_shape == (32, 32, 1)
        assert spec.stem_channels == (8, 16, 32)
        assert spec.stem_kernels == (3, 3, 3)
        assert spec.stem_pool == 2
        assert spec.final_pool_2d == 2
        assert spec.inception_base == 16

    def test_scaled_2d_full_size_keeps_reference(self):
        spec = NetworkSpec.scaled_2d(128, 128)
        assert spec.stem_channels == (32, 64, 128)
        assert spec.stem_kernels == (15, 7, 5)
        assert spec.stem_pool == 5
        assert spec.inception_base == 64

    def test_scaled_2d_never_upscales(self):
        spec = NetworkSpec.scaled_2d(256, 256)
        assert spec.stem_kernels == (15, 7, 5)


class TestNetwork:
    def test_forward_shape_and_dtype(self, rng):
        net = Network(tiny_3d_spec())
        X, _ = make_batch(rng, n=3)
        out = net.forward(X, train=True)
        assert out.shape == (3, 3)
        assert out.dtype == np.float32

    def test_desk_scale_parameter_count(self):
        net = Network(NetworkSpec(kind="cnn3d", input_shape=(4, 8, 32)))
        assert net.n_params == 130_819
        assert net.n_params < 2_000_000

    def test_input_validation(self, rng):
        net = Network(tiny_3d_spec())
        with pytest.raises(ValueError):
            net.forward(rng.normal(size=(2, 5, 8, 32)))

    def test_incompatible_spec_fails_at_build_time(self):
        # pooling shrinks the tensor until a kernel no longer fits; the
        # constructor must surface that instead of failing mid-training
        with pytest.raises(ValueError):
            Network(NetworkSpec(kind="cnn3d", input_shape=(4, 4, 4),
                                **TINY_3D))

    def test_predict_batches_match_single_pass(self, rng):
        net = Network(tiny_3d_spec())
        X, _ = make_batch(rng, n=7)
        full = net.predict(X, batch_size=7)
        split = net.predict(X, batch_size=2)
        np.testing.assert_allclose(full, split, atol=1e-6)

    def test_construction_deterministic_in_seed(self, rng):
        a = Network(tiny_3d_spec(seed=5))
        b = Network(tiny_3d_spec(seed=5))
        c = Network(tiny_3d_spec(seed=6))
        for pa, pb in zip(a.params(), b.params()):
            np.testing.assert_array_equal(pa.value, pb.value)
        assert any(not np.array_equal(pa.value, pc.value)
                   for pa, pc in zip(a.params(), c.params()))


class TestTraining:
    def test_loss_decreases_on_learnable_problem(self, rng):
        net = Network(tiny_3d_spec())
        X, y = make_batch(rng, n=16)
        y = (y - y.mean(0)) / y.std(0)
        history = train_network(net, X, y, epochs=8, batch_size=8,
                                learning_rate=3e-3, seed=0)
        assert len(history) == 8
        assert history[-1] < history[0]

    def test_non_finite_inputs_rejected_up_front(self, rng):
        net = Network(tiny_3d_spec())
        X, y = make_batch(rng, n=4)
        X[0, 0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="finite"):
            train_network(net, X, y, epochs=1, batch_size=4)
        X, y = make_batch(rng, n=4)
        y[1, 2] = np.inf
        with pytest.raises(ValueError, match="finite"):
            train_network(net, X, y, epochs=1, batch_size=4)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numerically_dead_network_raises(self, rng):
        # overflowing weights drive activations to inf and the batch
        # statistics to nan; training must stop with a diagnostic instead
        # of looping on garbage (the overflow itself warns, which is fine)
        net = Network(tiny_3d_spec())
        net.params()[0].value[...] = np.float32(1e38)
        X, y = make_batch(rng, n=8)
        with pytest.raises((RuntimeError, FloatingPointError),
                           match="non-finite"):
            train_network(net, X, y, epochs=1, batch_size=8)

    def test_target_shape_validated(self, rng):
        net = Network(tiny_3d_spec())
        X, y = make_batch(rng, n=4)
        with pytest.raises(ValueError):
            train_network(net, X, y[:, :2], epochs=1, batch_size=4)

    def test_training_is_deterministic(self, rng):
        X, y = make_batch(rng, n=8)
        y = (y - y.mean(0)) / y.std(0)
        runs = []
        for _ in range(2):
            net = Network(tiny_3d_spec())
            train_network(net, X, y, epochs=2, batch_size=4, seed=3)
            runs.append(net.predict(X))
        np.testing.assert_array_equal(runs[0], runs[1])


class TestSerialisation:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        net = Network(tiny_3d_spec())
        X, y = make_batch(rng, n=8)
        y = (y - y.mean(0)) / y.std(0)
        train_network(net, X, y, epochs=2, batch_size=4)
        manifest, blob = save_network(net, tmp_path / "model.json",
                                      extra={"note": 1})
        loaded, extra = load_network(manifest, with_extra=True)
        assert extra == {"note": 1}
        assert loaded.spec == net.spec
        for pa, pb in zip(net.params(), loaded.params()):
            assert pa.value.tobytes() == pb.value.tobytes()
        for (_, ba), (_, bb) in zip(net.buffers(), loaded.buffers()):
            assert ba.tobytes() == bb.tobytes()
        np.testing.assert_array_equal(net.predict(X), loaded.predict(X))

    def test_rejects_unknown_manifest_version(self, tmp_path, rng):
        net = Network(tiny_3d_spec())
        manifest, _ = save_network(net, tmp_path / "model.json")
        payload = json.loads((tmp_path / "model.json").read_text())
        payload["format_version"] = 99
        (tmp_path / "model.json").write_text(json.dumps(payload))
        with pytest.raises(ValueError, match="version"):
            load_network(tmp_path / "model.json")


class TestLocalizer:
    def test_sklearn_protocol(self):
        model = CNNLocalizer(kind="cnn3d", epochs=3)
        params = model.get_params()
        assert params["kind"] == "cnn3d"
        assert params["epochs"] == 3
        assert clone(model).get_params() == params

    def test_fit_predict_shapes_and_scale_invariance(self, rng):
        X, y = make_batch(rng, n=12)
        model = CNNLocalizer(kind="cnn3d", epochs=2, batch_size=6,
                             spec_overrides=TINY_3D)
        model.fit(X, y)
        pred = model.predict(X)
        assert pred.shape == (12, 3)
        # fingerprints are power-normalised, so transmit power cancels
        np.testing.assert_allclose(model.predict(X * 7.5), pred, rtol=1e-4,
                                   atol=1e-4)

    def test_2d_variant_consumes_matrices(self, rng):
        X = rng.uniform(0.1, 1.0, size=(10, 32, 32))
        y = rng.uniform(-5.0, 5.0, size=(10, 3))
        model = CNNLocalizer(kind="cnn2d", epochs=2, batch_size=5,
                             spec_overrides=dict(stem_channels=(4, 4, 4),
                                                 inception_base=4))
        model.fit(X, y)
        assert model.predict(X).shape == (10, 3)

    def test_predictions_in_target_units(self, rng):
        # constant targets must be recoverable exactly through the
        # internal standardisation
        X, _ = make_batch(rng, n=6)
        y = np.tile([2.0, -1.0, 4.0], (6, 1))
        model = CNNLocalizer(kind="cnn3d", epochs=1, batch_size=6,
                             spec_overrides=TINY_3D)
        model.fit(X, y)
        np.testing.assert_allclose(model.predict(X), y, atol=1e-5)

    def test_save_load_round_trip(self, tmp_path, rng):
        X, y = make_batch(rng, n=8)
        model = CNNLocalizer(kind="cnn3d", epochs=1, batch_size=4,
                             spec_overrides=TINY_3D)
        model.fit(X, y)
        model.save(tmp_path / "model.json")
        again = CNNLocalizer.load(tmp_path / "model.json")
        np.testing.assert_array_equal(model.predict(X), again.predict(X))

    def test_unfitted_predict_and_save_raise(self, tmp_path):
        model = CNNLocalizer()
        with pytest.raises(RuntimeError):
            model.predict(np.ones((1, 4, 8, 32)))
        with pytest.raises(RuntimeError):
            model.save(tmp_path / "model.json")

    def test_zero_fingerprint_rejected(self, rng):
        X, y = make_batch(rng, n=4)
        X[2] = 0.0
        model = CNNLocalizer(kind="cnn3d", epochs=1,
                             spec_overrides=TINY_3D)
        with pytest.raises(ValueError):
            model.fit(X, y)
