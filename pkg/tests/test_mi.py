import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from repinv.inverter import InversionConfig, InversionModel, log_prob
from repinv.mi import (
    MIEstimate,
    bin_activations,
    binning_mi,
    empirical_entropy,
    kde_noise_bound,
    knn_distances,
    kraskov_entropy,
    nce_bound,
    nce_from_log_probs,
)

from _stubs import PixelTaps, tiny_images

GAUSS_H = 0.5 * math.log(2 * math.pi * math.e)


def _table_mi(table):
    p = np.asarray(table, dtype=np.float64)
    p = p / p.sum()
    px, py = p.sum(axis=1), p.sum(axis=0)
    return sum(p[i, j] * math.log(p[i, j] / (px[i] * py[j])) for i in range(p.shape[0]) for j in range(p.shape[1]) if p[i, j] > 0)


def _samples_from_table(counts):
    xs, hs = [], []
    for (i, j), c in np.ndenumerate(np.asarray(counts)):
        xs += [i] * c
        hs += [float(j)] * c
    return np.array(xs), np.array(hs)[:, None]


class TestBinning:
    def test_distinct_per_id(self):
        ids = np.arange(400) % 4
        assert binning_mi(ids, ids[:, None] * 2.5, 30).value == pytest.approx(math.log(4), abs=1e-12)

    def test_constant_activation(self):
        ids = np.arange(50) % 5
        est = binning_mi(ids, np.full((50, 3), 7.0), 30)
        assert est.value == 0.0 and est.bins == 30

    @pytest.mark.parametrize("counts", [[[4, 1], [1, 4]], [[3, 1], [2, 6]], [[5, 0], [0, 5]]])
    def test_hand_computed_joint(self, counts):
        xs, hs = _samples_from_table(counts)
        assert abs(binning_mi(xs, hs, 2).value - _table_mi(counts)) <= 1e-12

    def test_single_bin_collapse(self):
        a = np.array([[0.0, 1.0], [0.0, 2.0], [0.0, 3.0]])
        assert bin_activations(a, 30)[:, 0].tolist() == [0, 0, 0]
        assert bin_activations(a, 30)[:, 1].tolist() == [0, 15, 29]

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(2, 200), ids=st.integers(1, 12), dims=st.integers(1, 3))
    def test_bounded_by_marginal_entropies(self, seed, n, ids, dims):
        rng = np.random.default_rng(seed)
        x = rng.integers(0, ids, n)
        a = np.maximum(rng.normal(size=(n, dims)) + x[:, None] * 0.3, 0)
        value = binning_mi(x, a, 30).value
        hx = empirical_entropy(np.unique(x, return_inverse=True)[1])
        hh = empirical_entropy(np.unique(bin_activations(a, 30), axis=0, return_inverse=True)[1].reshape(-1))
        assert 0.0 <= value <= min(hx, hh) + 1e-12
        assert value <= math.log(len(np.unique(x))) + 1e-12

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(2, 300))
    def test_coarser_bins_never_increase(self, seed, n):
        rng = np.random.default_rng(seed)
        x = np.arange(n)
        a = rng.normal(size=(n, 2))
        assert binning_mi(x, a, 10).value <= binning_mi(x, a, 30).value + 1e-12

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="rows"):
            binning_mi(np.arange(3), np.zeros((4, 1)))


class TestKraskov:
    def test_standard_gaussian(self):
        x = np.random.default_rng(0).normal(size=(10_000, 1))
        assert abs(kraskov_entropy(x, 3).value - GAUSS_H) <= 0.05 * GAUSS_H

    def test_unit_uniform(self):
        x = np.random.default_rng(1).random((10_000, 1))
        assert abs(kraskov_entropy(x, 3).value) <= 0.05

    def test_two_dimensional_gaussian(self):
        x = np.random.default_rng(2).normal(size=(4000, 2))
        assert kraskov_entropy(x, 3).value == pytest.approx(2 * GAUSS_H, rel=0.05)

    def test_identical_samples(self):
        est = kraskov_entropy(np.ones((100, 2)), 3)
        assert np.isfinite(est.value) and est.value < 2 * math.log(1e-10) + 10

    @pytest.mark.parametrize("k,n", [(5, 5), (0, 5), (6, 5)])
    def test_bad_k(self, k, n):
        with pytest.raises(ValueError, match="k must"):
            kraskov_entropy(np.zeros((n, 1)), k)

    def test_distances_match_brute_force(self):
        x = np.random.default_rng(3).normal(size=(50, 3))
        d = np.sqrt(((x[:, None] - x[None]) ** 2).sum(-1))
        np.fill_diagonal(d, np.inf)
        np.testing.assert_allclose(knn_distances(x, 2, chunk=7), np.sort(d, axis=1)[:, 1], rtol=1e-9)

    def test_variance_shrinks_with_n(self):
        spread = {}
        for n in (1000, 10_000):
            vals = [kraskov_entropy(np.random.default_rng(100 + r).normal(size=(n, 1)), 3).value for r in range(4)]
            spread[n] = np.var(vals, ddof=1)
        assert spread[10_000] < spread[1000]


class TestKde:
    def test_constant_activations(self):
        est = kde_noise_bound(np.full((10_000, 1), 2.5), 1.0)
        assert est.value <= 0.1
        assert est.value >= -3 * est.stderr

    @pytest.mark.parametrize("d", [1, 2])
    def test_gaussian_activations(self, d):
        a = np.random.default_rng(d).normal(size=(10_000, d))
        target = d / 2 * math.log(2)
        assert kde_noise_bound(a, 1.0).value == pytest.approx(target, rel=0.15)

    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 1000), sigma2=st.sampled_from([0.1, 1.0, 4.0]))
    def test_nonnegative_up_to_noise(self, seed, sigma2):
        a = np.random.default_rng(seed).exponential(size=(400, 2))
        est = kde_noise_bound(a, sigma2, seed=seed)
        assert est.value >= -3 * est.stderr

    def test_errors(self):
        with pytest.raises(ValueError, match="variance"):
            kde_noise_bound(np.zeros((4, 1)), 0.0)
        with pytest.raises(ValueError, match="empty split"):
            kde_noise_bound(np.zeros((4, 1)), 1.0, held_out=0.0)
        with pytest.raises(ValueError, match="two samples"):
            kde_noise_bound(np.zeros((1, 1)), 1.0)


class TestNce:
    def _uniform(self):
        cfg = InversionConfig(levels=2, layers=1, filters=4)
        return InversionModel(cfg, (2, 2, 1), (2,), layer="FC3").zero_params()

    def test_uniform_inverter(self):
        data = tiny_images(n=30, size=2, levels=2)
        est = nce_bound(self._uniform(), PixelTaps((2, 2, 1)), "FC3", data.subset("test"))
        assert abs(est.value + 4 * math.log(2)) <= 1e-12
        assert est.stderr == 0.0 and est.bits_per_dim == pytest.approx(1.0)

    def test_equals_minus_heldout_nll(self):
        cfg = InversionConfig(levels=4, layers=1, filters=4)
        m = InversionModel(cfg, (4, 4, 1), (4,), layer="FC3")
        rng = np.random.default_rng(0)
        m.set_params({k: rng.normal(size=v.shape) for k, v in m.params.items()})
        data = tiny_images(n=50)
        test = data.subset("test")
        taps = PixelTaps((4, 4, 1))
        lp = log_prob(m, test.images, taps.extract(test.images, "FC3"))
        est = nce_bound(m, taps, "FC3", test)
        assert est.value == np.mean(lp)
        assert est.stderr == pytest.approx(np.std(lp, ddof=1) / math.sqrt(len(lp)), rel=1e-12)

    def test_lower_nll_means_higher_nce(self):
        a = nce_from_log_probs([-3.0, -5.0], 4)
        b = nce_from_log_probs([-4.0, -6.0], 4)
        assert a.value > b.value

    def test_empty(self):
        with pytest.raises(ValueError, match="non-empty"):
            nce_from_log_probs([], 4)


class TestEstimateRecord:
    def test_aux_fields_required(self):
        with pytest.raises(ValueError, match="required"):
            MIEstimate(1.0, "kraskov_entropy", 10, k=3)
        with pytest.raises(ValueError, match="not applicable"):
            MIEstimate(1.0, "binning", 10, bins=30, k=3)

    def test_bad_kind_and_count(self):
        with pytest.raises(ValueError):
            MIEstimate(1.0, "absolute_mi", 10)
        with pytest.raises(ValueError):
            MIEstimate(1.0, "binning", 0, bins=2)
