import itertools

import numpy as np
import pytest

from dubeval.errors import DataError, NumericError
from dubeval.proxy_mos import (
    MetricNormalizer,
    ProxyWeights,
    WeightEnsemble,
    equal_weights,
    fit_ensemble,
    fit_normalizer,
    learn_weights,
    predictive_distribution,
    project_simplex,
    proxy_score,
)

IDENTITY_NORM = MetricNormalizer(mean=np.zeros(5), std=np.ones(5), sign=np.ones(5))


def _pool(rng, n=200, noise=0.05, w=(0.7, 0.0, 0.0, 0.3, 0.0)):
    """Standard-normal metric pool with MOS driven by the given weights."""
    X = rng.normal(size=(n, 5))
    y = X @ np.asarray(w) + noise * rng.normal(size=n)
    return X, y


def grid_rho(X_normed, y, step=0.05):
    """Best Pearson over a dense simplex grid, brute force."""
    units = int(round(1.0 / step))
    best = -2.0
    yc = y - y.mean()
    yn = yc / np.linalg.norm(yc)
    for cuts in itertools.combinations(range(units + 4), 4):
        counts = np.diff((-1,) + cuts + (units + 4,)) - 1
        w = np.array(counts) * step
        s = X_normed @ w
        sc = s - s.mean()
        norm = np.linalg.norm(sc)
        if norm == 0:
            continue
        rho = float(sc @ yn / norm)
        if rho > best:
            best = rho
    return best


class TestNormalizer:
    def test_two_point_z_score(self):
        raw = np.array([[50.0, 0.5, 0.3, 3.0, 0.75],
                        [60.0, 0.6, 0.4, 5.0, 0.85]])
        norm = fit_normalizer(raw)
        normed = norm.transform(raw)
        assert normed[0, 3] == pytest.approx(-1.0, abs=1e-12)
        assert normed[1, 3] == pytest.approx(1.0, abs=1e-12)

    def test_lower_better_flipped(self):
        raw = np.array([[50.0, 0.5, 0.1, 3.0, 0.75],
                        [60.0, 0.6, 0.3, 5.0, 0.85]])
        norm = fit_normalizer(raw)
        normed = norm.transform(raw)
        assert normed[0, 2] > normed[1, 2]

    def test_constant_column_named(self):
        rng = np.random.default_rng(0)
        raw = rng.normal(size=(10, 5))
        raw[:, 0] = 42.0
        with pytest.raises(NumericError, match="zero variance: peavs"):
            fit_normalizer(raw)

    def test_stored_statistics_reused(self):
        rng = np.random.default_rng(1)
        raw = rng.normal(size=(20, 5))
        norm = fit_normalizer(raw)
        other = rng.normal(size=(5, 5)) + 10.0
        normed = norm.transform(other)
        assert np.allclose(normed, norm.sign * (other - norm.mean) / norm.std)

    def test_affine_rescaling_absorbed(self):
        rng = np.random.default_rng(2)
        raw = rng.normal(size=(30, 5))
        scaled = raw.copy()
        scaled[:, 1] = 3.0 * raw[:, 1] + 7.0
        a = fit_normalizer(raw).transform(raw)
        b = fit_normalizer(scaled).transform(scaled)
        assert np.allclose(a, b, atol=1e-12)

    def test_non_finite_rejected(self):
        norm = IDENTITY_NORM
        with pytest.raises(DataError):
            norm.transform([[1.0, 2.0, np.nan, 4.0, 5.0]])


class TestProxyScore:
    def test_weighted_sum_fixture(self):
        w = ProxyWeights(w=np.full(5, 0.2), a=1.0, b=3.0, rho=0.0)
        score = proxy_score(w, IDENTITY_NORM, [[1.0, -1.0, 0.0, 2.0, -2.0]])
        assert score[0] == pytest.approx(3.0, abs=1e-12)

    def test_single_metric_preserves_ranking(self):
        rng = np.random.default_rng(3)
        raw = rng.normal(size=(40, 5))
        norm = fit_normalizer(raw)
        w = ProxyWeights(w=np.array([0.0, 0.0, 0.0, 1.0, 0.0]), a=0.5, b=3.0, rho=0.0)
        scores = proxy_score(w, norm, raw)
        assert np.array_equal(np.argsort(scores), np.argsort(raw[:, 3]))

    def test_clamped_to_mos_scale(self):
        w = ProxyWeights(w=np.full(5, 0.2), a=10.0, b=3.0, rho=0.0)
        scores = proxy_score(w, IDENTITY_NORM, [[9.0] * 5, [-9.0] * 5])
        assert scores[0] == 5.0 and scores[1] == 1.0
        unclamped = proxy_score(w, IDENTITY_NORM, [[9.0] * 5], clamp=False)
        assert unclamped[0] > 5.0

    def test_weights_must_be_on_simplex(self):
        with pytest.raises(DataError):
            ProxyWeights(w=np.array([0.5, 0.5, 0.5, 0.0, 0.0]), a=1.0, b=0.0, rho=0.0)
        with pytest.raises(DataError):
            ProxyWeights(w=np.array([1.2, -0.2, 0.0, 0.0, 0.0]), a=1.0, b=0.0, rho=0.0)


class TestSimplexProjection:
    def test_already_on_simplex(self):
        w = np.array([[0.2, 0.3, 0.1, 0.25, 0.15]])
        assert np.allclose(project_simplex(w), w, atol=1e-12)

    def test_kkt_conditions_on_random_inputs(self):
        rng = np.random.default_rng(4)
        V = rng.normal(scale=3.0, size=(200, 5))
        W = project_simplex(V)
        assert np.all(W >= 0)
        assert np.allclose(W.sum(axis=1), 1.0, atol=1e-9)
        for v, w in zip(V, W):
            active = w > 0
            lam = (w - v)[active]
            # shift is constant on the support, and inactive coordinates
            # would need a non-positive value at that shift
            assert np.ptp(lam) < 1e-9
            assert np.all(v[~active] + lam.mean() <= 1e-9)


class TestLearnWeights:
    def test_perfect_single_predictor(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(60, 5))
        y = X[:, 2].copy()
        w = learn_weights(X, y, IDENTITY_NORM, seed=0)
        assert w.rho > 1.0 - 1e-6
        assert w.w[2] > 0.95

    def test_recovers_sparse_weights(self):
        rng = np.random.default_rng(6)
        X, y = _pool(rng)
        norm = fit_normalizer(X)
        w = learn_weights(X, y, norm, seed=0)
        assert np.max(np.abs(w.w - np.array([0.7, 0.0, 0.0, 0.3, 0.0]))) < 0.1

    def test_matches_grid_search_oracle(self):
        rng = np.random.default_rng(7)
        X, y = _pool(rng, n=150)
        norm = fit_normalizer(X)
        learned = learn_weights(X, y, norm, seed=0)
        oracle = grid_rho(norm.transform(X), y)
        assert learned.rho >= oracle - 1e-3

    def test_label_shift_scale_invariance(self):
        rng = np.random.default_rng(8)
        X, y = _pool(rng, n=80)
        a = learn_weights(X, y, IDENTITY_NORM, seed=3)
        b = learn_weights(X, 2.0 * y + 1.0, IDENTITY_NORM, seed=3)
        assert np.allclose(a.w, b.w, atol=1e-9)

    def test_dominates_equal_weights(self):
        for seed in range(5):
            rng = np.random.default_rng(100 + seed)
            X, y = _pool(rng, n=60, noise=0.5,
                         w=(0.4, 0.1, 0.2, 0.2, 0.1))
            norm = fit_normalizer(X)
            learned = learn_weights(X, y, norm, seed=seed)
            ew = equal_weights(norm, norm.transform(X), y)
            assert learned.rho >= ew.rho - 1e-9

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(9)
        X, y = _pool(rng, n=50)
        a = learn_weights(X, y, IDENTITY_NORM, seed=5)
        b = learn_weights(X, y, IDENTITY_NORM, seed=5)
        assert np.array_equal(a.w, b.w) and a.rho == b.rho

    def test_input_validation(self):
        rng = np.random.default_rng(10)
        X = rng.normal(size=(9, 5))
        with pytest.raises(DataError, match=">= 10"):
            learn_weights(X, np.arange(9.0), IDENTITY_NORM, seed=0)
        X = rng.normal(size=(12, 5))
        with pytest.raises(NumericError, match="constant MOS"):
            learn_weights(X, np.full(12, 3.0), IDENTITY_NORM, seed=0)
        with pytest.raises(DataError):
            learn_weights(X, np.arange(11.0), IDENTITY_NORM, seed=0)


class TestEnsemble:
    def test_noiseless_pool_zero_variance(self):
        rng = np.random.default_rng(11)
        X = rng.normal(size=(40, 5))
        y = X[:, 0].copy()
        ens = fit_ensemble(X, y, IDENTITY_NORM, K=8, seed=0)
        _, var, (lo, hi) = predictive_distribution(ens, X[:5])
        assert np.all(var < 1e-6)
        assert np.allclose(lo, hi, atol=1e-2)

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(12)
        X, y = _pool(rng, n=40, noise=0.3)
        a = fit_ensemble(X, y, IDENTITY_NORM, K=5, seed=2)
        b = fit_ensemble(X, y, IDENTITY_NORM, K=5, seed=2)
        for ma, mb in zip(a.members, b.members):
            assert np.array_equal(ma.w, mb.w)

    def test_members_on_simplex(self):
        rng = np.random.default_rng(13)
        X, y = _pool(rng, n=40, noise=0.3)
        ens = fit_ensemble(X, y, IDENTITY_NORM, K=10, seed=0)
        for m in ens.members:
            assert np.all(m.w >= 0)
            assert m.w.sum() == pytest.approx(1.0, abs=1e-6)

    def test_member_rho_sanity_band(self):
        rng = np.random.default_rng(14)
        X, y = _pool(rng, n=80, noise=0.4)
        norm = fit_normalizer(X)
        full = learn_weights(X, y, norm, seed=0)
        ens = fit_ensemble(X, y, norm, K=20, seed=0)
        mean_rho = np.mean([m.rho for m in ens.members])
        assert mean_rho <= full.rho + 0.05

    def test_small_pool_rejected(self):
        rng = np.random.default_rng(15)
        X = rng.normal(size=(5, 5))
        with pytest.raises(DataError):
            fit_ensemble(X, np.arange(5.0), IDENTITY_NORM, K=3, seed=0)


class TestPredictiveDistribution:
    def _two_member_ensemble(self, b_values):
        members = tuple(
            ProxyWeights(w=np.array([1.0, 0.0, 0.0, 0.0, 0.0]), a=1.0, b=b, rho=0.0)
            for b in b_values
        )
        return WeightEnsemble(members=members, normalizer=IDENTITY_NORM)

    def test_two_point_moments(self):
        ens = self._two_member_ensemble([2.0, 4.0])
        mean, var, (lo, hi) = predictive_distribution(ens, [[0.0] * 5], level=0.9)
        assert mean[0] == pytest.approx(3.0, abs=1e-12)
        assert var[0] == pytest.approx(1.0, abs=1e-12)  # population convention
        z = 1.6448536269514722
        assert lo[0] == pytest.approx(3.0 - z, abs=1e-9)
        assert hi[0] == pytest.approx(3.0 + z, abs=1e-9)

    def test_extra_variance_widens(self):
        ens = self._two_member_ensemble([2.0, 4.0])
        _, var0, (lo0, _) = predictive_distribution(ens, [[0.0] * 5])
        _, var1, (lo1, _) = predictive_distribution(ens, [[0.0] * 5], extra_variance=0.5)
        assert var1[0] == pytest.approx(var0[0] + 0.5, abs=1e-12)
        assert lo1[0] < lo0[0]

    def test_entropy_ordering_matches_variance(self):
        from dubeval.active_learning import entropy_of_variance

        var = np.array([0.3, 0.05, 1.2, 0.0])
        ent = entropy_of_variance(var)
        assert np.array_equal(np.argsort(ent), np.argsort(var, kind="stable"))
