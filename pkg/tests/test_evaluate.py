import numpy as np
import pytest

from cinn_nmr import evaluate as ev
from cinn_nmr.chemdata import rows_to_arrays, synth_dataset
from cinn_nmr.evaluate import MetricError, PerturbationConfig
from cinn_nmr.invnet import InvertibleNet
from cinn_nmr.numeric import RngStream, Tensor


@pytest.fixture(scope="module")
def net():
    return InvertibleNet(blocks_per_stage=1, seed=4, zero_init_residual=False, gain=0.5)


@pytest.fixture(scope="module")
def data():
    return rows_to_arrays(synth_dataset(6, 9))


class _LatentStub:
    """Network stand-in whose forward returns fixed latents."""

    dtype = np.dtype(np.float64)

    def __init__(self, latents):
        self.latents = latents

    def forward(self, x):
        return Tensor(self.latents[: len(x)])


class _ScaledInverse:
    def __init__(self, net, c):
        self.net, self.c, self.dtype = net, c, net.dtype

    def forward(self, x):
        return self.net.forward(x)

    def inverse(self, latent):
        return Tensor(self.c * self.net.inverse(latent).data)


class TestF1:
    def test_perfect(self):
        t = np.random.default_rng(0).random((5, 128)) < 0.1
        assert ev.f1_bits(t, t, from_logits=False) == 1.0

    def test_complement(self):
        t = np.random.default_rng(0).random((5, 128)) < 0.1
        assert ev.f1_bits(~t, t, from_logits=False) == 0.0

    def test_strict_threshold(self):
        assert ev.binarize_logits(np.array([0.0, 1e-9, -1e-9])).tolist() == [0, 1, 0]

    def test_random_baseline(self):
        rng = np.random.default_rng(7)
        t = rng.random(10_000) < 0.0643
        p = rng.random(10_000) < 0.0643
        assert ev.f1_bits(p, t, from_logits=False) == pytest.approx(0.0643, abs=0.02)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            ev.f1_bits(np.zeros(3), np.zeros(4))


class TestInvertibility:
    def test_reconstruction_float64(self, data):
        net64 = InvertibleNet(blocks_per_stage=1, seed=4, dtype=np.float64, zero_init_residual=False)
        mean, worst = ev.reconstruction_error(net64, data[0])
        assert worst <= 1e-9 and mean <= worst

    def test_zfree_stats_standard_normal(self):
        z = RngStream(0).normal((400, 1024))
        stats = ev.zfree_stats(_LatentStub(z), np.zeros((400, 4, 16, 16)))
        assert abs(stats[0]) < 0.01 and stats[1] < 0.06
        assert abs(stats[2] - 1) < 0.01 and stats[3] < 0.06

    def test_zfree_stats_constant_rows(self):
        z = np.repeat(np.arange(5.0)[:, None], 1024, axis=1)
        stats = ev.zfree_stats(_LatentStub(z), np.zeros((5, 4, 16, 16)))
        assert stats[2] == 0 and stats[3] == 0


class TestPerturbation:
    def test_zero_epsilon(self, net, data):
        cfg = PerturbationConfig(epsilon=0.0, n_noise=3, n_prior=2)
        assert ev.cd_local(net, data[0], cfg) == 0.0
        assert ev.cd_prior(net, data[0], cfg) == 0.0

    def test_monotone_in_epsilon(self, net, data):
        small = ev.cd_local(net, data[0], PerturbationConfig(epsilon=0.1, n_noise=3))
        large = ev.cd_local(net, data[0], PerturbationConfig(epsilon=0.2, n_noise=3))
        assert large >= small > 0

    def test_reproducible(self, net, data):
        cfg = PerturbationConfig(epsilon=0.1, n_noise=2, n_prior=2, seed=3)
        assert ev.cd_prior(net, data[0], cfg) == ev.cd_prior(net, data[0], cfg)

    def test_rows_independent_of_batch(self, net, data):
        cfg = PerturbationConfig(epsilon=0.1, n_noise=2, seed=3)
        full = ev.cd_local_draws(net, data[0], cfg)
        assert np.allclose(full[:3], ev.cd_local_draws(net, data[0][:3], cfg), rtol=1e-5)

    def test_rcd_zero(self, net, data):
        assert ev.rcd(0.0, net, data[0]) == 0.0

    def test_rcd_scale_invariant(self, net, data):
        cfg = PerturbationConfig(epsilon=0.1, n_noise=2)
        base = ev.rcd(ev.cd_local(net, data[0], cfg), net, data[0])
        scaled = _ScaledInverse(net, 3.0)
        assert ev.rcd(ev.cd_local(scaled, data[0], cfg), scaled, data[0]) == pytest.approx(base, rel=1e-5)

    def test_rcd_zero_denominator(self):
        net = InvertibleNet(blocks_per_stage=1)
        with pytest.raises(MetricError):
            ev.rcd(1.0, net, np.zeros((2, 4, 16, 16), np.float32))

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            PerturbationConfig(epsilon=-1)


class TestCorrelation:
    def test_identity(self):
        a = np.array([3, 5, 1, 8, 2])
        assert ev.pearson(a, a) == pytest.approx(1.0)

    def test_shuffled_near_zero(self):
        rng = np.random.default_rng(0)
        a = rng.integers(0, 20, 200)
        rs = [ev.pearson(a, rng.permutation(a)) for _ in range(200)]
        assert abs(np.mean(rs)) < 0.02

    def test_zero_variance(self):
        with pytest.raises(MetricError, match="zero variance"):
            ev.pearson([1, 1, 1], [1, 2, 3])

    def test_count_ones_by_channel(self, data):
        x = data[0]
        np.testing.assert_array_equal(ev.count_ones(x), x.reshape(len(x), -1).sum(axis=1))
        np.testing.assert_array_equal(ev.count_ones(x, 3), x[:, 3].reshape(len(x), -1).sum(axis=1))


class TestReport:
    def test_positions_table(self):
        net = InvertibleNet(blocks_per_stage=1)
        codes = np.zeros((2, 128), np.uint8)
        codes[0, [3, 12]] = 1
        table = ev.code_report(net, np.zeros((2, 4, 16, 16), np.float32), codes, [10016372, 5], 2)
        lines = table.splitlines()
        assert lines[0].split() == ["molecule", "ID", "Real", "Predicted"]
        assert lines[1].split(None, 1) == ["10016372", "3, 12"]
        assert lines[2].strip() == "5"

    def test_k_too_large(self, net, data):
        with pytest.raises(ValueError):
            ev.code_report(net, data[0], data[1], list(range(6)), 7)

    def test_evaluate_all_deterministic(self, net, data):
        cfg = PerturbationConfig(n_noise=2, n_prior=2, seed=1)
        a = ev.evaluate_all(net, data[0], data[1], cfg)
        b = ev.evaluate_all(net, data[0], data[1], cfg)
        assert a.to_csv() == b.to_csv()
        assert a.to_text().count("\n") == 13


class TestOrderInvariance:
    def test_count_correlation_ignores_row_order(self, net):
        x, codes = rows_to_arrays(synth_dataset(12, 21))
        perm = np.random.default_rng(0).permutation(12)
        a = ev.count_correlation(x, codes, net, RngStream(3))
        b = ev.count_correlation(x[perm], codes[perm], net, RngStream(3))
        assert a == pytest.approx(b, rel=1e-12)

    def test_cd_draws_follow_rows(self, net, data):
        cfg = PerturbationConfig(epsilon=0.1, n_noise=2, n_prior=2, seed=3)
        perm = np.array([5, 0, 3, 1, 4, 2])
        np.testing.assert_allclose(ev.cd_prior_draws(net, data[0][perm], cfg), ev.cd_prior_draws(net, data[0], cfg)[perm], rtol=1e-5)
