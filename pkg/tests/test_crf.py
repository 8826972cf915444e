import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from dualcorenet import CrfConfig, Tensor, precision
from dualcorenet.crf import (PROB_EPS, crf_energy_terms, cross_entropy_map, mean_field_infer, pairwise_energy,
                             segmentation_loss)
from dualcorenet.errors import ConfigError, ShapeError
from dualcorenet.gradcheck import check_gradients
from dualcorenet.tensor import concat, sigmoid
from dualcorenet.verify import (block_fixture, dense_mean_field_oracle, isolated_flips, noisy_block_fixture,
                                pairwise_energy_oracle)


def random_unary(r, h, w):
    fg = r.uniform(0.05, 0.95, size=(h, w))
    return np.stack([1 - fg, fg], axis=-1)


class TestMeanField:
    def test_zero_weights_identity(self, rng):
        u = random_unary(rng, 5, 6)
        out = mean_field_infer(Tensor(u), rng.random((5, 6)), CrfConfig(w_spatial=0, w_bilateral=0))
        assert np.array_equal(out.data, Tensor(u).data)

    def test_block_fixture_against_dense_oracle(self, f64):
        unary, img = block_fixture(9, 5)
        cfg = CrfConfig(iterations=5)
        q = mean_field_infer(Tensor(unary), img, cfg).data
        np.testing.assert_allclose(q, dense_mean_field_oracle(unary, img, cfg), rtol=1e-6)
        fg = np.argmax(q, -1) == 1
        assert ndimage.label(fg)[1] == 1
        np.testing.assert_allclose(q.sum(-1), 1.0, atol=1e-5)

    def test_single_pixel_is_softmax_of_log_unary(self, f64):
        u = np.array([[[0.3, 0.7]]])
        q = mean_field_infer(Tensor(u), np.array([[0.4]]), CrfConfig()).data
        np.testing.assert_allclose(q, u, rtol=1e-12)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 6), st.integers(0, 10_000))
    def test_random_fields_match_oracle(self, h, w, iters, seed):
        r = np.random.default_rng(seed)
        unary, img = random_unary(r, h, w), r.random((h, w))
        cfg = CrfConfig(iterations=iters, w_spatial=float(r.uniform(0, 2)), w_bilateral=float(r.uniform(0, 2)),
                        spatial_theta=float(r.uniform(0.5, 4)))
        with precision("f64"):
            q = mean_field_infer(Tensor(unary), img, cfg).data
        np.testing.assert_allclose(q, dense_mean_field_oracle(unary, img, cfg), rtol=1e-6, atol=1e-12)

    @pytest.mark.parametrize("iters", [1, 2, 3, 4, 5])
    def test_normalized_after_every_iteration(self, f64, rng, iters):
        q = mean_field_infer(Tensor(random_unary(rng, 7, 7)), rng.random((7, 7)), CrfConfig(iterations=iters)).data
        assert (q >= 0).all()
        np.testing.assert_allclose(q.sum(-1), 1.0, atol=1e-5)

    def test_batched_equals_per_sample(self, f64, rng):
        u = np.stack([random_unary(rng, 6, 6) for _ in range(3)])
        img = rng.random((3, 6, 6))
        batched = mean_field_infer(Tensor(u), img, CrfConfig()).data
        for i in range(3):
            np.testing.assert_allclose(batched[i], mean_field_infer(Tensor(u[i]), img[i], CrfConfig()).data,
                                       rtol=1e-12)

    def test_extent_mismatch(self):
        with pytest.raises(ShapeError):
            mean_field_infer(Tensor(np.full((4, 4, 2), 0.5)), np.zeros((4, 5)), CrfConfig())

    def test_isolated_flips_do_not_increase(self, f64):
        unary, img = noisy_block_fixture()
        counts = [isolated_flips(unary)]
        for t in range(1, 7):
            counts.append(isolated_flips(mean_field_infer(Tensor(unary), img, CrfConfig(iterations=t)).data))
        assert counts[0] > 0
        assert all(b <= a for a, b in zip(counts, counts[1:]))

    def test_gradient_wrt_logits(self, f64, rng):
        logits = Tensor(rng.normal(size=(1, 5, 5, 1)), requires_grad=True)
        labels = (rng.random((1, 5, 5)) < 0.5).astype(int)
        img = rng.random((1, 5, 5))
        cfg = CrfConfig()

        def loss():
            fg = sigmoid(logits)
            unet = concat([1.0 - fg, fg], axis=-1)
            return segmentation_loss(unet, mean_field_infer(unet, img, cfg), labels, img, cfg, 0.67)

        assert check_gradients(loss, {"logits": logits}, 1e-6)["logits"] < 1e-3


class TestConfig:
    def test_invalid(self):
        with pytest.raises(ConfigError):
            CrfConfig(iterations=0)
        with pytest.raises(ConfigError):
            CrfConfig(spatial_theta=0)

    def test_non_potts_warns(self):
        with pytest.warns(UserWarning):
            CrfConfig(compatibility=((1.0, 0.0), (0.0, 1.0)))

    def test_bilateral_bandwidth_scales_with_field(self):
        cfg = CrfConfig()
        assert cfg.bilateral_spatial(224, 224) == cfg.bilateral_theta_spatial
        assert cfg.bilateral_spatial(16, 16) == pytest.approx(cfg.bilateral_theta_spatial * 16 / 224)


class TestEnergy:
    def test_perfect_probs_unary_near_zero(self, f64):
        labels = np.array([[0, 1], [1, 1]])
        probs = np.stack([1 - labels, labels], -1) * (1 - PROB_EPS) + (1 - np.stack([1 - labels, labels], -1)) * PROB_EPS
        unary, _ = crf_energy_terms(Tensor(probs), labels, np.zeros((2, 2)), CrfConfig())
        assert -1e-5 < unary.item() <= 0

    def test_uniform_labels_zero_pairwise(self, rng):
        assert pairwise_energy(np.ones((6, 6), int), rng.random((6, 6)), CrfConfig()) == 0.0

    def test_checkerboard_brute_force(self):
        labels = np.indices((3, 3)).sum(0) % 2
        img = np.zeros((3, 3))
        cfg = CrfConfig(w_spatial=1.0, w_bilateral=0.0, spatial_theta=1e6)  # unit kernels
        assert pairwise_energy(labels, img, cfg) == pytest.approx(5 * 4)
        cfg = CrfConfig()
        assert pairwise_energy(labels, img, cfg) == pytest.approx(pairwise_energy_oracle(labels, img, cfg), rel=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 7), st.integers(1, 7), st.integers(0, 10_000))
    def test_random_pairwise_oracle(self, h, w, seed):
        r = np.random.default_rng(seed)
        labels, img = (r.random((h, w)) < 0.5).astype(int), r.random((h, w))
        cfg = CrfConfig(w_spatial=float(r.uniform(0, 2)), w_bilateral=float(r.uniform(0, 2)))
        assert pairwise_energy(labels, img, cfg) == pytest.approx(pairwise_energy_oracle(labels, img, cfg),
                                                                  rel=1e-12, abs=1e-12)


class TestSegmentationLoss:
    def setup_method(self):
        r = np.random.default_rng(7)
        self.unet_np = random_unary(r, 8, 8)
        self.crf_np = random_unary(r, 8, 8)
        self.labels = (r.random((8, 8)) < 0.5).astype(int)
        self.img = r.random((8, 8))

    def test_lambda_zero_is_plain_cross_entropy(self):
        unet, crf = Tensor(self.unet_np), Tensor(self.crf_np)
        got = segmentation_loss(unet, crf, self.labels, self.img, CrfConfig(), 0.0)
        assert got.data.tobytes() == cross_entropy_map(unet, self.labels).data.tobytes()

    def test_lambda_one_perfect_uniform(self, f64):
        labels = np.ones((4, 4), int)
        onehot = np.stack([1 - labels, labels], -1).astype(float)
        got = segmentation_loss(Tensor(onehot), Tensor(onehot), labels, np.zeros((4, 4)), CrfConfig(), 1.0)
        assert 0 <= got.item() < 1e-6

    def test_term_by_term(self, f64):
        cfg, lam = CrfConfig(), 0.67
        got = segmentation_loss(Tensor(self.unet_np), Tensor(self.crf_np), self.labels, self.img, cfg, lam).item()
        onehot = np.stack([1 - self.labels, self.labels], -1)
        ce = lambda p: -np.mean(np.log(np.maximum((p * onehot).sum(-1), PROB_EPS)))  # noqa: E731
        pair = pairwise_energy_oracle(self.labels, self.img, cfg)
        want = (1 - lam) * ce(self.unet_np) + lam * ce(self.crf_np) + lam * cfg.pairwise_beta * pair / 64
        assert got == pytest.approx(want, rel=1e-12)

    def test_lambda_out_of_range(self):
        with pytest.raises(ConfigError):
            segmentation_loss(Tensor(self.unet_np), Tensor(self.crf_np), self.labels, self.img, CrfConfig(), 1.5)
