import numpy as np
import pytest

from cinn_nmr import loss as L
from cinn_nmr.chemdata import FORBIDDEN_MASK, rows_to_arrays, synth_dataset
from cinn_nmr.invnet import InvertibleNet
from cinn_nmr.numeric import RngStream, ShapeError


def _single_bit(i, n=128):
    v = np.zeros(n)
    v[i] = 1
    return v


def _confident(i, scale=20.0):
    return np.where(_single_bit(i) > 0, scale, -scale)


class TestSmearTarget:
    def test_kernel_shape(self):
        np.testing.assert_array_equal(L.smear_target(_single_bit(10))[7:14], [0, 0.25, 0.5, 1, 0.5, 0.25, 0])

    def test_overlap_takes_maximum(self):
        t = L.smear_target(_single_bit(10) + _single_bit(12))
        np.testing.assert_array_equal(t[9:14], [0.5, 1, 0.5, 1, 0.5])

    def test_edges_clipped(self):
        t = L.smear_target(_single_bit(0))
        np.testing.assert_array_equal(t[:3], [1, 0.5, 0.25])


class TestDistanceAwareBce:
    def test_minimum_at_target(self):
        target = _single_bit(40) + _single_bit(90)
        best = float(L.distance_aware_bce(np.where(target > 0, 30.0, -30.0), target).data)
        for shift in (1, 2, 5):
            moved = np.roll(target, shift)
            assert best < float(L.distance_aware_bce(np.where(moved > 0, 30.0, -30.0), target).data)

    def test_near_miss_cheaper_than_far_miss(self):
        t = _single_bit(60)
        losses = [float(L.distance_aware_bce(_confident(60 + d), t).data) for d in range(5)]
        assert losses[0] < losses[1] < losses[2] < losses[3]
        assert losses[3] == pytest.approx(losses[4], rel=1e-12)

    def test_non_negative(self):
        rng = np.random.default_rng(0)
        assert float(L.distance_aware_bce(rng.standard_normal((4, 128)) * 5, rng.random((4, 128)) < 0.1).data) >= 0

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            L.distance_aware_bce(np.zeros(127), np.zeros(127))
        with pytest.raises(ShapeError):
            L.distance_aware_bce(np.zeros((2, 128)), np.zeros((3, 128)))


class TestPenalties:
    def test_range_inside_unit_interval(self):
        assert float(L.range_penalty(np.random.default_rng(0).random((4, 16, 16))).data) == 0

    def test_range_single_violation(self):
        x = np.full(50, 0.5)
        x[7] = 1.5
        assert float(L.range_penalty(x).data) == pytest.approx(0.25 / 50)

    def test_range_mirror_symmetry(self):
        x = np.random.default_rng(1).standard_normal(100) * 2
        assert float(L.range_penalty(x).data) == pytest.approx(float(L.range_penalty(1 - x).data))

    def test_sparsity(self):
        assert float(L.sparsity_penalty(np.zeros(64)).data) == 0
        x = np.zeros(64)
        x[3] = 1.0
        assert float(L.sparsity_penalty(x).data) == pytest.approx(1 / 64)
        x = np.where(np.arange(10000) < 643, 1.0, 0.0)
        assert float(L.sparsity_penalty(x).data) == pytest.approx(0.0643)

    def test_forbidden_zero_on_encoded_molecules(self):
        x, _ = rows_to_arrays(synth_dataset(10, 0))
        assert float(L.forbidden_region_penalty(x).data) == 0

    def test_forbidden_single_cell(self):
        x = np.zeros((4, 16, 16))
        x[2, 9, 3] = 1.0
        assert float(L.forbidden_region_penalty(x).data) == pytest.approx(1 / FORBIDDEN_MASK.sum())
        assert FORBIDDEN_MASK.sum() == 480

    def test_forbidden_uniform(self):
        assert float(L.forbidden_region_penalty(np.full((3, 4, 16, 16), 0.5)).data) == pytest.approx(0.25)

    def test_forbidden_wrong_shape(self):
        with pytest.raises(ShapeError):
            L.forbidden_region_penalty(np.zeros((4, 15, 16)))

    def test_zfree_exact_moments(self):
        z = np.tile([1.0, -1.0], 448)
        assert float(L.zfree_moment_penalty(z).data) == pytest.approx(0, abs=1e-15)

    def test_zfree_zero_vector(self):
        assert float(L.zfree_moment_penalty(np.zeros(896)).data) == 1.0

    def test_zfree_reference_moments(self):
        base = np.tile([1.0, -1.0], 448)
        z = 0.0858 + 0.5861 * base
        expected = 0.0858**2 + (0.5861 - 1) ** 2
        assert float(L.zfree_moment_penalty(z).data) == pytest.approx(expected)
        assert expected == pytest.approx(0.1787, abs=5e-5)


@pytest.fixture(scope="module")
def batch():
    return rows_to_arrays(synth_dataset(4, 1))


class TestTotalLoss:
    def test_zero_weights(self, batch):
        net = InvertibleNet(blocks_per_stage=1, seed=0, zero_init_residual=False)
        lb = L.total_loss(batch, net, L.LossWeights(0, 0, 0, 0, 0), RngStream(0))
        assert lb.total == 0
        assert lb.y > 0 and lb.range > 0 and lb.sparse > 0 and lb.zfree > 0

    def test_weighted_sum(self, batch):
        net = InvertibleNet(blocks_per_stage=1, seed=1, zero_init_residual=False)
        w = L.LossWeights(1.0, 2.0, 0.3, 0.4, 0.5)
        lb = L.total_loss(batch, net, w, RngStream(0))
        parts = np.array([lb.y, lb.range, lb.sparse, lb.forbidden, lb.zfree])
        assert lb.total == pytest.approx(float(np.dot(parts, w.as_tuple())), rel=1e-5)
        assert lb.loss_x == pytest.approx(2.0 * lb.range + 0.3 * lb.sparse + 0.4 * lb.forbidden)

    def test_same_seed_same_loss(self, batch):
        net = InvertibleNet(blocks_per_stage=1, seed=2, zero_init_residual=False)
        a = L.total_loss(batch, net, L.LossWeights(), RngStream(5))
        b = L.total_loss(batch, net, L.LossWeights(), RngStream(5))
        assert a.total == b.total

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            L.LossWeights(w_y=-1)

    def test_empty_batch_rejected(self):
        with pytest.raises(ShapeError):
            L.total_loss((np.zeros((0, 4, 16, 16)), np.zeros((0, 128))), InvertibleNet(1), L.LossWeights(), RngStream(0))
