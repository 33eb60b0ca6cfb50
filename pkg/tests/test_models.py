import io

import numpy as np
import pytest

from ordinal_coral.dataio import ScalerParams, extend_labels
from ordinal_coral.errors import InvalidConfigError, ShapeError
from ordinal_coral.models import (
    CompositeModel,
    CoralRegressor,
    DenoisingAutoencoder,
    PcaCoralModel,
    composite_forward,
    coral_forward,
    corrupt,
    dae_forward,
    load_model,
    parameter_hash,
    pca_fit,
    pca_project,
    predict_rank,
    save_model,
)
from ordinal_coral.numerics import coral_loss


class TestCorrupt:
    def test_zero_noise(self):
        x = np.random.default_rng(0).random((4, 3))
        np.testing.assert_array_equal(corrupt(x, 0.0, 1), x)

    def test_clipped_and_deterministic(self):
        x = np.random.default_rng(0).random((50, 6))
        a = corrupt(x, 0.5, 3)
        assert a.min() >= 0 and a.max() <= 1
        np.testing.assert_array_equal(a, corrupt(x, 0.5, 3))

    def test_noise_is_zero_mean(self):
        # Monte-Carlo: before clipping, mean offset within 3 sigma / sqrt(n)
        sigma, n = 0.1, 100_000
        x = np.full((n, 1), 0.5)
        rng = np.random.default_rng(7)
        noise = rng.normal(0.0, sigma, size=x.shape)
        out = corrupt(x, sigma, np.random.default_rng(7))
        unclipped = x + noise
        inside = (unclipped >= 0) & (unclipped <= 1)
        np.testing.assert_array_equal(out[inside], unclipped[inside])
        assert abs((unclipped - x).mean()) < 3 * sigma / np.sqrt(n)

    def test_negative_noise(self):
        with pytest.raises(InvalidConfigError):
            corrupt(np.zeros((1, 1)), -0.1)


class TestDae:
    def test_shapes(self):
        dae = DenoisingAutoencoder(33, rng=0)
        z, rec = dae_forward(dae, np.random.default_rng(1).random((10, 33)), training=True)
        assert z.shape == (10, 3) and rec.shape == (10, 33)

    def test_architecture(self):
        dae = DenoisingAutoencoder(33, rng=0)
        widths = [(l.in_dim, l.out_dim) for l in dae.encoder.layers + dae.decoder.layers if hasattr(l, "out_dim")]
        assert widths == [(33, 64), (64, 3), (3, 64), (64, 33)]
        kinds = [type(l).__name__ for l in dae.encoder.layers]
        assert kinds == ["Linear", "BatchNorm", "Activation", "Linear"]

    def test_infer_deterministic(self):
        dae = DenoisingAutoencoder(5, rng=0)
        x = np.random.default_rng(1).random((4, 5))
        a = dae_forward(dae, x)
        b = dae_forward(dae, x)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            dae_forward(DenoisingAutoencoder(5, rng=0), np.zeros((3, 4)))


class TestCoral:
    def setup_method(self):
        self.reg = CoralRegressor(3, (8, 6), 5, rng=0)

    def test_single_shared_weight(self):
        head = self.reg.head
        assert head.params["weight"].shape == (6,)
        assert head.params["bias"].shape == (4,)
        trainable = [l for l in self.reg.network.layers if l.params]
        assert len(trainable) == 3

    def test_constant_differences(self):
        z = np.random.default_rng(2).normal(size=(20, 3))
        o = coral_forward(self.reg, z)
        b = self.reg.head.params["bias"]
        for j in range(4):
            for jj in range(4):
                np.testing.assert_allclose(o[:, j] - o[:, jj], b[j] - b[jj], atol=1e-12)

    def test_zero_hidden_gives_biases(self):
        head = self.reg.head
        np.testing.assert_array_equal(head.forward(np.zeros((2, 6))), np.tile(head.params["bias"], (2, 1)))

    def test_identical_inputs(self):
        z = np.tile([[0.1, -0.4, 2.0]], (3, 1))
        o = coral_forward(self.reg, z)
        assert np.all(o == o[0])

    def test_sorted_biases_monotone(self):
        z = np.random.default_rng(3).normal(scale=5, size=(500, 3))
        self.reg.head.params["bias"][...] = [2.0, 0.5, -0.1, -3.0]
        bits = coral_forward(self.reg, z) > 0
        assert np.all(np.diff(bits.astype(int), axis=1) <= 0)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            coral_forward(self.reg, np.zeros((2, 4)))


class TestPredictRank:
    def test_probabilities(self):
        p = np.array([[0.9, 0.7, 0.3, 0.1]])
        assert predict_rank(np.log(p / (1 - p)))[0] == 2

    def test_all_negative_positive(self):
        assert predict_rank(-np.ones((1, 4)))[0] == 0
        assert predict_rank(np.ones((1, 4)))[0] == 4

    @pytest.mark.parametrize("k", range(2, 11))
    def test_saturated_round_trip(self, k):
        grades = np.arange(k)
        logits = 20.0 * extend_labels(grades, k) - 10.0
        np.testing.assert_array_equal(predict_rank(logits), grades)


class TestPca:
    def test_rank_one(self):
        rng = np.random.default_rng(0)
        x = np.zeros((30, 4))
        x[:, 2] = rng.normal(size=30)
        m = pca_fit(x, 1)
        np.testing.assert_allclose(np.abs(m.components[:, 0]), [0, 0, 1, 0], atol=1e-12)

    def test_lossless_full_basis(self):
        x = np.random.default_rng(1).normal(size=(12, 5))
        m = pca_fit(x, 5)
        recon = pca_project(m, x) @ m.components.T + m.mean
        np.testing.assert_allclose(recon, x, atol=1e-8)

    def test_orthonormal_and_centred(self):
        x = np.random.default_rng(2).normal(size=(40, 7))
        m = pca_fit(x, 3)
        np.testing.assert_allclose(m.components.T @ m.components, np.eye(3), atol=1e-8)
        np.testing.assert_allclose(pca_project(m, x).mean(axis=0), 0, atol=1e-8)

    @pytest.mark.parametrize("seed", range(10))
    def test_variances_against_eigendecomposition(self, seed):
        x = np.random.default_rng(seed).normal(size=(10, 5))
        m = pca_fit(x, 4)
        cov = np.cov(x, rowvar=False)
        eig = np.sort(np.linalg.eigvalsh(cov))[::-1][:4]
        np.testing.assert_allclose(m.explained_variance, eig, rtol=1e-10)
        assert np.all(np.diff(m.explained_variance) <= 0)

    def test_too_many_components(self):
        with pytest.raises(InvalidConfigError):
            pca_fit(np.zeros((4, 10)), 4)


class TestComposite:
    def make(self, frozen):
        dae = DenoisingAutoencoder(6, hidden=8, rng=0)
        return CompositeModel(dae.encoder.clone(), CoralRegressor(3, (8, 4), 5, rng=1), frozen)

    def step(self, model, x, t):
        from ordinal_coral.numerics import Adam
        nets = model.trainable_networks()
        opt = Adam([n.flat for n in nets], 0.01)
        _, g = coral_loss(composite_forward(model, x, training=True), t)
        model.backward(g)
        opt.step([n.flat_grad for n in nets])

    def data(self):
        rng = np.random.default_rng(5)
        return rng.random((16, 6)), extend_labels(rng.integers(0, 5, 16), 5)

    def test_output_shape(self):
        x, _ = self.data()
        assert composite_forward(self.make(False), x).shape == (16, 4)

    def test_frozen_encoder_untouched(self):
        m = self.make(True)
        x, t = self.data()
        before = parameter_hash(m.encoder)
        probe = m.encode(x)
        self.step(m, x, t)
        assert parameter_hash(m.encoder) == before
        np.testing.assert_array_equal(m.encode(x), probe)

    def test_unfrozen_encoder_moves(self):
        m = self.make(False)
        x, t = self.data()
        before = m.encoder.flat.copy()
        self.step(m, x, t)
        assert np.any(m.encoder.flat != before)

    def test_width_mismatch(self):
        dae = DenoisingAutoencoder(6, rng=0)
        with pytest.raises(ShapeError):
            CompositeModel(dae.encoder, CoralRegressor(4, (8, 4), 5, rng=1))


class TestSerialization:
    def test_composite_round_trip(self):
        dae = DenoisingAutoencoder(6, hidden=8, rng=0)
        dae.encoder.layers[1].running_mean[...] = np.arange(8) * 0.1
        m = CompositeModel(dae.encoder, CoralRegressor(3, (8, 4), 5, rng=1), True)
        scaler = ScalerParams(np.array([0.1] * 6), np.array([1 / 3] * 6), [])
        buf = io.BytesIO()
        save_model(buf, m, scaler, {"seed": 3})
        buf.seek(0)
        m2, s2, cfg = load_model(buf)
        assert parameter_hash(m) == parameter_hash(m2)
        assert m2.encoder_frozen and cfg == {"seed": 3}
        assert s2.maximum.tobytes() == scaler.maximum.tobytes()
        x = np.random.default_rng(2).random((5, 6))
        assert m.predict_logits(x).tobytes() == m2.predict_logits(x).tobytes()

    def test_pca_round_trip(self, tmp_path):
        x = np.random.default_rng(0).random((20, 6))
        m = PcaCoralModel(pca_fit(x, 3), CoralRegressor(3, (8, 4), 5, rng=1))
        save_model(tmp_path / "m.npz", m)
        m2, s2, _ = load_model(tmp_path / "m.npz")
        assert s2 is None
        assert parameter_hash(m) == parameter_hash(m2)
        assert m.predict_logits(x).tobytes() == m2.predict_logits(x).tobytes()
