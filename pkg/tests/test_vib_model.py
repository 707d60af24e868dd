import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bvib.errors import ConfigError
from bvib.vib_model import (
    LOG2_CLASSES,
    DecoderParams,
    EncoderParams,
    LatentStats,
    VIBModel,
    encode,
    kl_nats,
    load_checkpoint,
    mi_lower_bits,
    mi_upper_bits,
    reparameterize,
    save_checkpoint,
    server_objective,
    vib_loss,
)
from oracles import central_diff, rel_err, torch_vib_grads


def small_model(seed=0, d_in=6, hidden=5, K=3, dec_hidden=4, classes=10, beta=0.1, literal=False):
    rng = np.random.default_rng(seed)
    enc = EncoderParams.init(rng, d_in, hidden, K)
    dec = DecoderParams.init(rng, K, dec_hidden, classes)
    # non-zero biases so every parameter gets exercised
    for p in (enc, dec):
        for name, v in p.named().items():
            if name.startswith("b"):
                v[:] = rng.normal(scale=0.3, size=v.shape)
    return VIBModel(enc, dec, beta=beta, paper_literal=literal)


class TestEncode:
    def test_zero_weights(self):
        stats = encode(EncoderParams.zeros(784, 8, 4), np.random.default_rng(0).random((3, 784)))
        assert not stats.mu.any() and not stats.logvar.any()
        assert np.array_equal(stats.var, np.ones((3, 4)))

    def test_shape_contract(self):
        enc = EncoderParams.init(np.random.default_rng(1), 784, 32, 8)
        stats = encode(enc, np.random.default_rng(2).random((5, 784)))
        assert stats.mu.shape == (5, 8) and stats.logvar.shape == (5, 8) and stats.batch_size == 5

    def test_matches_reexecution(self):
        enc = EncoderParams.init(np.random.default_rng(7), 784, 16, 4)
        x = np.random.default_rng(8).random((2, 784))
        stats = encode(enc, x)
        for m in range(2):
            h = [max(0.0, sum(enc.W1[j, i] * x[m, i] for i in range(784)) + enc.b1[j]) for j in range(16)]
            mu = [sum(enc.W_mu[k, j] * h[j] for j in range(16)) + enc.b_mu[k] for k in range(4)]
            lv = [sum(enc.W_lv[k, j] * h[j] for j in range(16)) + enc.b_lv[k] for k in range(4)]
            np.testing.assert_allclose(stats.mu[m], mu, rtol=1e-12, atol=1e-13)
            np.testing.assert_allclose(stats.logvar[m], lv, rtol=1e-12, atol=1e-13)


class TestReparameterize:
    def test_zero_noise(self):
        s = LatentStats([[1.0, -2.0]], [[0.3, 1.0]])
        assert np.array_equal(reparameterize(s, np.zeros((1, 2))), s.mu)

    @pytest.mark.parametrize("literal", [False, True])
    def test_unit_variance(self, literal):
        s = LatentStats([[0.0]], [[0.0]])
        assert reparameterize(s, [[1.5]], literal)[0, 0] == 1.5

    def test_modes_differ_by_multiplier(self):
        s = LatentStats([[1.0]], [[math.log(4.0)]])
        assert reparameterize(s, [[0.5]])[0, 0] == pytest.approx(2.0, rel=1e-15)
        assert reparameterize(s, [[0.5]], paper_literal=True)[0, 0] == pytest.approx(3.0, rel=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            reparameterize(LatentStats([[0.0, 0.0]], [[0.0, 0.0]]), np.zeros(3))

    def test_sample_moments(self):
        rng = np.random.default_rng(42)
        mu, var = np.array([0.7, -1.3, 0.0]), np.array([0.25, 2.0, 1.0])
        n = 100_000
        s = LatentStats(np.tile(mu, (n, 1)), np.tile(np.log(var), (n, 1)))
        z = reparameterize(s, rng.standard_normal((n, 3)))
        se_mean = np.sqrt(var / n)
        se_var = var * np.sqrt(2.0 / (n - 1))
        assert np.all(np.abs(z.mean(0) - mu) < 3 * se_mean)
        assert np.all(np.abs(z.var(0, ddof=1) - var) < 3 * se_var)


class TestMIBounds:
    def test_upper_zero_at_prior(self):
        assert mi_upper_bits(LatentStats(np.zeros((4, 6)), np.zeros((4, 6)))) == 0.0

    def test_upper_unit_mean(self):
        assert mi_upper_bits(LatentStats([[1.0]], [[0.0]])) == pytest.approx(0.7213475204444817, rel=1e-14)

    def test_upper_quarter_variance(self):
        s = LatentStats([[0.0]], [[math.log(0.25)]])
        assert kl_nats(s)[0] == pytest.approx(0.31814718055994531, rel=1e-14)
        assert mi_upper_bits(s) == pytest.approx(0.45898935966663872, rel=1e-14)

    def test_lower_perfect(self):
        logq = np.full((3, 10), -np.inf)
        logq[np.arange(3), [2, 5, 9]] = 0.0
        assert mi_lower_bits(logq, [2, 5, 9]) == 0.0

    def test_lower_uniform(self):
        assert mi_lower_bits(np.full((4, 10), np.log(0.1)), [0, 1, 2, 3]) == pytest.approx(-LOG2_CLASSES, rel=1e-14)

    def test_lower_hand_arithmetic(self):
        logq = np.full((2, 10), np.log(0.75 / 9))
        logq[0, 3] = np.log(0.5)
        logq[1, 7] = np.log(0.25)
        assert mi_lower_bits(logq, [3, 7]) == pytest.approx(-1.5, rel=1e-14)

    def test_lower_label_range(self):
        with pytest.raises(ConfigError):
            mi_lower_bits(np.full((1, 10), np.log(0.1)), [10])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 10_000))
    def test_upper_nonnegative(self, M, K, seed):
        rng = np.random.default_rng(seed)
        assert mi_upper_bits(LatentStats(rng.normal(size=(M, K)) * 3, rng.normal(size=(M, K)) * 3)) >= 0.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 5), st.integers(0, 10_000))
    def test_lower_nonpositive(self, M, seed):
        rng = np.random.default_rng(seed)
        logits = rng.normal(size=(M, 10)) * 5
        logq = logits - np.log(np.exp(logits).sum(1, keepdims=True))
        assert mi_lower_bits(logq, rng.integers(0, 10, M)) <= 0.0

    def test_closed_form_on_random_stats(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            mu, var = rng.normal(), rng.uniform(0.05, 5.0)
            direct = 0.5 * (mu * mu + var - 1.0 - math.log(var)) / math.log(2)
            assert mi_upper_bits(LatentStats([[mu]], [[math.log(var)]])) == pytest.approx(direct, rel=1e-12, abs=1e-12)

    def test_monte_carlo_kl(self):
        rng = np.random.default_rng(9)
        mu, lv = rng.normal(size=4), rng.normal(scale=0.7, size=4)
        s = LatentStats(mu[None], lv[None])
        n = 100_000
        z = mu + rng.standard_normal((n, 4)) * np.exp(0.5 * lv)
        log_p = -0.5 * (((z - mu) ** 2) / np.exp(lv) + lv + np.log(2 * np.pi))
        log_r = -0.5 * (z**2 + np.log(2 * np.pi))
        estimate = np.mean(np.sum(log_p - log_r, axis=1))
        assert estimate == pytest.approx(kl_nats(s)[0], rel=0.01)


class TestLoss:
    def test_beta_zero(self):
        out = vib_loss(-2.0, 5.0, 0.0)
        assert out.loss == 2.0 and out.objective == -2.0

    def test_optimum(self):
        assert vib_loss(0.0, 0.0, 1e-3).objective == 0.0

    def test_hand_arithmetic(self):
        out = vib_loss(-1.5, 0.7213475204444817, 0.001)
        assert out.objective == pytest.approx(-1.5007213475204445, rel=1e-14)
        assert out.loss == -out.objective

    def test_negative_beta(self):
        with pytest.raises(ConfigError):
            vib_loss(0.0, 0.0, -1.0)


@pytest.mark.parametrize("literal", [False, True])
@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(seed, literal):
    model = small_model(seed, K=2 + seed, literal=literal)
    rng = np.random.default_rng(100 + seed)
    M = 1 + seed
    x, y = rng.random((M, 6)), rng.integers(0, 10, M)
    eps = rng.standard_normal((M, model.enc.latent_dim))
    _, enc_g, dec_g, _ = model.gradients(x, y, eps)
    loss = lambda: model.gradients(x, y, eps)[0].loss  # noqa: E731
    for params, grads in ((model.enc, enc_g), (model.dec, dec_g)):
        for name, arr in params.named().items():
            assert rel_err(grads[name], central_diff(loss, arr)) < 1e-4, name


def test_latent_gradients_match_finite_differences():
    model = small_model(3, K=4)
    rng = np.random.default_rng(4)
    mu, lv = rng.normal(size=(3, 4)), rng.normal(scale=0.5, size=(3, 4))
    eps, y = rng.standard_normal((3, 4)), rng.integers(0, 10, 3)
    stats = LatentStats(mu, lv)
    _, _, d_mu, d_lv, _ = server_objective(model.dec, stats, eps, y, 0.1)
    loss = lambda: server_objective(model.dec, stats, eps, y, 0.1)[0].loss  # noqa: E731
    assert rel_err(d_mu, central_diff(loss, stats.mu)) < 1e-4
    assert rel_err(d_lv, central_diff(loss, stats.logvar)) < 1e-4


@pytest.mark.parametrize("literal", [False, True])
def test_gradients_match_torch_autograd(literal):
    pytest.importorskip("torch")
    model = small_model(11, d_in=12, hidden=9, K=8, dec_hidden=7, beta=0.05, literal=literal)
    rng = np.random.default_rng(12)
    x, y, eps = rng.random((4, 12)), rng.integers(0, 10, 4), rng.standard_normal((4, 8))
    breakdown, enc_g, dec_g, _ = model.gradients(x, y, eps)
    loss, t_enc, t_dec = torch_vib_grads(model.enc.named(), model.dec.named(), x, y, eps, 0.05, literal)
    assert breakdown.loss == pytest.approx(loss, rel=1e-12)
    for name in enc_g:
        np.testing.assert_allclose(enc_g[name], t_enc[name], rtol=1e-10, atol=1e-14)
    for name in dec_g:
        np.testing.assert_allclose(dec_g[name], t_dec[name], rtol=1e-10, atol=1e-14)


def test_latent_mismatch_rejected():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigError):
        VIBModel(EncoderParams.init(rng, 4, 3, 2), DecoderParams.init(rng, 3, 4))


def test_checkpoint_round_trip(tmp_path):
    model = small_model(21)
    path = save_checkpoint(tmp_path / "ckpt.npz", model.enc, model.dec)
    enc, dec = load_checkpoint(path)
    for a, b in ((model.enc, enc), (model.dec, dec)):
        for name, arr in a.named().items():
            got = b.named()[name]
            assert got.dtype == np.float64 and got.shape == arr.shape
            assert got.tobytes() == arr.tobytes()
