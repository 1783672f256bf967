import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.special import ndtr

from gradcodec import mcsim, prune
from gradcodec.distfit import LognormalParams
from gradcodec.errors import DomainError
from gradcodec.prune import LayerProfile, PruneSpec

SPARSITIES = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95]


def sparsity_by_quadrature(alpha, mu, sigma):
    """Expected zero fraction as the eps-average of the lognormal CDF at alpha*eps."""
    f = lambda eps: ndtr((math.log(alpha * eps) - mu) / sigma) if eps > 0 else 0.0
    ramp = [math.exp(mu + z * sigma) / alpha for z in (-8, -4, -2, 0, 2, 4, 8)]
    points = sorted(p for p in ramp if 0.0 < p < 1.0)
    return integrate.quad(f, 0.0, 1.0, epsabs=1e-13, epsrel=1e-12, limit=400, points=points or None)[0]


def normal_sparsity_by_quadrature(alpha, std):
    f = lambda eps: 2.0 * ndtr(alpha * eps / std) - 1.0
    return integrate.quad(f, 0.0, 1.0, epsabs=1e-13)[0]


def cosine_by_quadrature(alpha, sigma, log_bound):
    """Cosine from moments integrated over the standard normal exponent."""
    zmax = log_bound / sigma
    pdf = lambda z: math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    x2 = lambda z: math.exp(2 * sigma * z) * pdf(z)
    t2 = lambda z: (alpha * math.exp(sigma * z) if math.exp(sigma * z) <= alpha else math.exp(2 * sigma * z)) * pdf(z)
    brk = [min(math.log(alpha) / sigma, zmax)]
    ex2 = integrate.quad(x2, -40, zmax, limit=400, points=brk)[0]
    et2 = integrate.quad(t2, -40, zmax, limit=400, points=brk)[0]
    return math.sqrt(ex2 / et2)


class TestSparsity:
    @pytest.mark.parametrize("sigma", [0.3, 1.0, 3.0, 5.0])
    @pytest.mark.parametrize("log_alpha", [-6.0, -1.0, 0.0, 1.0, 4.0, 9.0])
    def test_matches_quadrature(self, sigma, log_alpha):
        alpha = math.exp(log_alpha)
        assert prune.sparsity_given_threshold(alpha, 0.0, sigma) == pytest.approx(
            sparsity_by_quadrature(alpha, 0.0, sigma), abs=1e-9)

    def test_alpha_one_sigma_three_against_empirical_cdf(self):
        x = np.sort(np.random.default_rng(8).lognormal(0.0, 3.0, 1_000_000))
        eps = np.random.default_rng(9).random(1000)
        mc = np.mean(np.searchsorted(x, eps, side="right") / x.size)
        assert abs(prune.sparsity_given_threshold(1.0, 0.0, 3.0) - mc) < 0.003

    @pytest.mark.parametrize("mu", [-10.0, -1.0, 2.5])
    def test_shift_identity(self, mu):
        for a in (0.01, 1.0, 30.0):
            assert prune.sparsity_given_threshold(a * math.exp(mu), mu, 3.0) == pytest.approx(
                prune.sparsity_given_threshold(a, 0.0, 3.0), abs=1e-12)

    def test_limits(self):
        assert prune.sparsity_given_threshold(1e-300, 0.0, 1.0) < 1e-12
        assert prune.sparsity_given_threshold(1e300, 0.0, 1.0) > 1 - 1e-12

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-30, 30), st.floats(1e-4, 5), st.floats(0.05, 8))
    def test_strictly_increasing(self, log_alpha, step, sigma):
        lo = prune.sparsity_given_threshold(math.exp(log_alpha), 0.0, sigma)
        hi = prune.sparsity_given_threshold(math.exp(log_alpha + step), 0.0, sigma)
        assert 0.0 <= lo <= hi <= 1.0
        if 1e-12 < lo and hi < 1 - 1e-9:
            assert hi > lo

    @pytest.mark.parametrize("args", [(0.0, 0.0, 1.0), (-1.0, 0.0, 1.0), (1.0, 0.0, 0.0), (1.0, 0.0, -2.0)])
    def test_domain(self, args):
        with pytest.raises(DomainError):
            prune.sparsity_given_threshold(*args)


class TestThreshold:
    @pytest.mark.parametrize("sigma", [0.05, 0.5, 1.0, 3.0, 5.0, 8.0])
    @pytest.mark.parametrize("S", SPARSITIES)
    def test_round_trip(self, S, sigma):
        a = prune.threshold_for_sparsity(S, 0.0, sigma)
        assert abs(prune.sparsity_given_threshold(a, 0.0, sigma) - S) < 1e-6

    @pytest.mark.parametrize("S", [0.5, 0.9])
    def test_shift_identity(self, S):
        assert prune.threshold_for_sparsity(S, -7.0, 2.0) == pytest.approx(
            math.exp(-7.0) * prune.threshold_for_sparsity(S, 0.0, 2.0), rel=1e-12)

    def test_sigma3_s09_by_simulation(self):
        x = np.random.default_rng(21).lognormal(0.0, 3.0, 1_000_000).astype(np.float32)
        y = prune.stochastic_prune(x, prune.threshold_for_sparsity(0.9, 0.0, 3.0), seed=4)
        assert abs(np.mean(y == 0) - 0.9) < 0.005

    @pytest.mark.parametrize("S", [0.0, 1.0, -0.1, 1.5])
    def test_domain(self, S):
        with pytest.raises(DomainError):
            prune.threshold_for_sparsity(S, 0.0, 1.0)


class TestNormalBaseline:
    @pytest.mark.parametrize("alpha", [0.01, 0.3, 1.0, 2.0, 10.0])
    def test_matches_quadrature(self, alpha):
        assert prune.normal_sparsity_given_threshold(alpha, 1.5) == pytest.approx(
            normal_sparsity_by_quadrature(alpha, 1.5), abs=1e-10)

    def test_round_trip(self):
        for S in SPARSITIES:
            a = prune.normal_threshold_for_sparsity(S, 2.0)
            assert abs(prune.normal_sparsity_given_threshold(a, 2.0) - S) < 1e-6


class TestBimodal:
    def test_zero_left_ratio_is_single_mode(self):
        p = LognormalParams(-3.0, 2.0)
        assert prune.bimodal_threshold(0.8, 0.0, p) == prune.threshold_for_sparsity(0.8, -3.0, 2.0)

    def test_right_mode_target(self):
        p = LognormalParams(0.0, 1.0)
        assert prune.bimodal_threshold(0.9, 0.5, p) == prune.threshold_for_sparsity(0.8, 0.0, 1.0)

    @pytest.mark.parametrize("l", [0.9, 0.95])
    def test_infeasible(self, l):
        with pytest.raises(DomainError, match="infeasible"):
            prune.bimodal_threshold(0.9, l, LognormalParams(0.0, 1.0))


class TestStochasticPrune:
    def test_above_threshold_passes_through(self, rng):
        x = (rng.random(1000) + 1.01).astype(np.float32) * rng.choice([-1, 1], 1000)
        np.testing.assert_array_equal(prune.stochastic_prune(x, 1.0, 3), x)

    def test_unbiased_at_half(self):
        y = prune.stochastic_prune(np.full(100_000, 0.5), 1.0, seed=0)
        assert set(np.unique(y)) <= {0.0, 1.0}
        assert abs(y.mean() - 0.5) < 0.01

    @pytest.mark.parametrize("r", [0.1, 0.5, 0.9])
    def test_seed_average_converges(self, r):
        outs = np.array([prune.stochastic_prune(np.array([r]), 1.0, seed=s)[0] for s in range(4000)])
        assert abs(outs.mean() - r) < 3 * math.sqrt(r * (1 - r) / outs.size)

    def test_negative_values_get_exact_minus_alpha(self):
        y = prune.stochastic_prune(np.full(1000, -0.7, np.float32), 0.9, seed=1)
        a = np.float32(0.9).view(np.uint32)
        assert set(y.view(np.uint32).tolist()) <= {0, int(a | 0x80000000)}

    def test_deterministic_and_chunk_invariant(self, monkeypatch, rng):
        x = rng.lognormal(0, 3, 600_000).astype(np.float32)
        monkeypatch.setenv("GRADCODEC_THREADS", "1")
        a = prune.stochastic_prune(x, 2.0, 5)
        monkeypatch.setenv("GRADCODEC_THREADS", "6")
        np.testing.assert_array_equal(a, prune.stochastic_prune(x, 2.0, 5))
        assert not np.array_equal(a, prune.stochastic_prune(x, 2.0, 6))

    @pytest.mark.parametrize("alpha", [0.0, -1.0])
    def test_alpha_domain(self, alpha):
        with pytest.raises(DomainError):
            prune.stochastic_prune(np.ones(3), alpha)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6, allow_nan=False, width=32), min_size=1, max_size=50),
           st.floats(1e-3, 1e3), st.integers(0, 2 ** 64 - 1))
    def test_codomain(self, xs, alpha, seed):
        x = np.array(xs, np.float32)
        y = prune.stochastic_prune(x, alpha, seed)
        a = np.float32(alpha)
        ok = (y == 0) | (y == a) | (y == -a) | ((y == x) & (np.abs(x) > a))
        assert ok.all()
        assert not np.any((np.abs(x) > a) & (y != x))


class TestCosine:
    def test_tiny_alpha_is_one(self):
        assert prune.analytic_cosine(1e-12, 3.0, 2.5) == pytest.approx(1.0, abs=1e-9)

    @pytest.mark.parametrize("convention", ["log", "linear"])
    @pytest.mark.parametrize("sigma", [1.0, 3.0, 5.0])
    @pytest.mark.parametrize("S", [0.5, 0.8, 0.95])
    def test_matches_quadrature(self, convention, sigma, S):
        k = 2.5
        alpha = prune.threshold_for_sparsity(S, 0.0, sigma)
        bound = prune.truncation_log_bound(sigma, k, convention)
        assert prune.analytic_cosine(alpha, sigma, k, convention) == pytest.approx(
            cosine_by_quadrature(alpha, sigma, bound), abs=1e-6)

    def test_in_unit_interval_over_grid(self):
        for sigma in (0.2, 1.0, 3.0, 5.0, 7.0):
            for k in (0.5, 1.0, 2.5, 4.0, math.inf):
                for la in np.linspace(-20, 40, 31):
                    c = prune.analytic_cosine(math.exp(la), sigma, k)
                    assert 0.0 < c <= 1.0

    def test_sigma3_lower_than_sigma5_at_090(self):
        c3 = prune.analytic_cosine(prune.threshold_for_sparsity(0.9, 0, 3.0), 3.0, 2.5)
        c5 = prune.analytic_cosine(prune.threshold_for_sparsity(0.9, 0, 5.0), 5.0, 2.5)
        assert c3 < c5

    def test_agrees_with_simulation(self):
        cfg = mcsim.SimConfig(sigma=3.0, k=2.5, n=300_000, seed=2)
        for S in (0.5, 0.9):
            alpha = prune.threshold_for_sparsity(S, 0.0, 3.0)
            assert abs(prune.analytic_cosine(alpha, 3.0, 2.5) - mcsim.empirical_cosine(alpha, cfg)) < 0.01

    @pytest.mark.parametrize("args", [(0.0, 1.0, 1.0), (1.0, 0.0, 1.0), (1.0, 1.0, 0.0)])
    def test_domain(self, args):
        with pytest.raises(DomainError):
            prune.analytic_cosine(*args)

    def test_unknown_convention(self):
        with pytest.raises(DomainError):
            prune.analytic_cosine(1.0, 1.0, 2.5, "cubic")


def _layer(name, n, rank, mu=0.0, sigma=3.0, k=2.5, **kw):
    return LayerProfile(name, n, LognormalParams(mu, sigma, k), rank, **kw)


def _cos_at(S, mu=0.0, sigma=3.0, k=2.5):
    return prune.analytic_cosine(prune.threshold_for_sparsity(S, mu, sigma, tol=1e-13) / math.exp(mu), sigma, k)


class TestHeterogeneous:
    def test_unconstrained_is_homogeneous(self):
        layers = [_layer("a", 1000, 1), _layer("b", 500, 0, mu=-4.0, sigma=2.0)]
        alloc = prune.heterogeneous_allocate(layers, 0.8)
        assert [a.spec.target_sparsity for a in alloc.layers] == [0.8, 0.8]
        assert alloc.overall_sparsity == pytest.approx(0.8, abs=1e-9)
        assert not alloc.warnings

    def test_compensation_arithmetic(self):
        deep = _layer("deep", 100_000, 0, mu=-2.0, min_cosine=_cos_at(0.5, mu=-2.0))
        shallow = _layer("shallow", 1_000_000, 1)
        alloc = prune.heterogeneous_allocate([shallow, deep], 0.9)
        by = {a.layer_id: a for a in alloc.layers}
        assert by["deep"].constrained and by["deep"].sparsity == pytest.approx(0.5, abs=1e-9)
        assert by["deep"].analytic_cos >= deep.min_cosine - 1e-12
        assert alloc.rest_sparsity == pytest.approx(0.94, abs=1e-8)
        assert by["shallow"].sparsity == pytest.approx(0.94, abs=1e-8)
        assert alloc.overall_sparsity == pytest.approx(0.9, abs=1e-8)
        assert [a.layer_id for a in alloc.layers] == ["deep", "shallow"]

    def test_cap_binds_with_shortfall_warning(self):
        deep = _layer("deep", 100_000, 0, min_cosine=_cos_at(0.5))
        shallow = _layer("shallow", 1_000_000, 1)
        with pytest.warns(prune.ShortfallWarning):
            alloc = prune.heterogeneous_allocate([deep, shallow], 0.95, max_cap=0.97)
        assert alloc.rest_sparsity == pytest.approx(0.995, abs=1e-8)
        assert alloc.layers[1].sparsity == pytest.approx(0.97, abs=1e-8)
        assert alloc.overall_sparsity == pytest.approx((0.97e6 + 0.5e5) / 1.1e6, abs=1e-8)
        assert any("shortfall" in w for w in alloc.warnings)

    def test_slack_constraint_leaves_threshold_alone(self):
        deep = _layer("deep", 1000, 0, min_cosine=0.01)
        alloc = prune.heterogeneous_allocate([deep, _layer("s", 1000, 1)], 0.8)
        assert alloc.layers[0].sparsity == pytest.approx(0.8, abs=1e-9)

    def test_all_constrained_reports_shortfall(self):
        layers = [_layer("a", 10, 0, min_cosine=_cos_at(0.3)), _layer("b", 10, 1, min_cosine=_cos_at(0.4))]
        with pytest.warns(prune.ShortfallWarning):
            alloc = prune.heterogeneous_allocate(layers, 0.9)
        assert alloc.rest_sparsity is None
        assert alloc.overall_sparsity == pytest.approx(0.35, abs=1e-6)

    def test_bimodal_layer(self):
        layer = _layer("bn", 1000, 0, left_ratio=0.4)
        alloc = prune.heterogeneous_allocate([layer], 0.9)
        assert alloc.layers[0].sparsity == pytest.approx(0.9, abs=1e-9)

    def test_errors(self):
        with pytest.raises(DomainError):
            prune.heterogeneous_allocate([], 0.9)
        with pytest.raises(DomainError):
            prune.heterogeneous_allocate([_layer("a", 1, 0)], 1.0)
        with pytest.raises(DomainError):
            _layer("a", 0, 0)

    def test_profile_from_dict(self):
        p = LayerProfile.from_dict({"layer_id": "x", "n": 5, "mu": -1, "sigma": 2, "k": None, "depth_rank": 3,
                                    "min_cosine": 0.9})
        assert p.params.k == math.inf and p.min_cosine == 0.9 and p.left_ratio is None


class TestPredictAndPrune:
    def test_achieved_matches_target(self):
        x = mcsim.sample_lognormal(mcsim.SimConfig(mu=-6.0, sigma=3.0, n=1_000_000, seed=5, signed=True))
        pruned, report, achieved = prune.predict_and_prune(x.astype(np.float32), PruneSpec(0.85, seed=2))
        assert abs(achieved - 0.85) < 0.005
        assert report.empirical_cos is not None and abs(report.analytic_cos - report.empirical_cos) < 0.02

    def test_near_zero_sparsity_is_identity(self, rng):
        x = rng.lognormal(0, 1, 10_000).astype(np.float32)
        pruned, _, achieved = prune.predict_and_prune(x, PruneSpec(1e-9))
        assert achieved == 0.0
        np.testing.assert_array_equal(pruned, x)

    def test_mask_excludes_left_mode_from_fit(self, rng):
        right = rng.lognormal(0.0, 1.0, 5000)
        left = rng.lognormal(-15.0, 1.0, 5000)
        x = np.concatenate([right, left]).astype(np.float32)
        mask = np.r_[np.zeros(5000, bool), np.ones(5000, bool)]
        _, report, _ = prune.predict_and_prune(x, PruneSpec(0.8), mask=mask)
        from gradcodec.distfit import fit_lognormal
        p = fit_lognormal(x[:5000])
        assert report.alpha == pytest.approx(prune.bimodal_threshold(0.8, 0.5, p))

    def test_mask_length_checked(self):
        with pytest.raises(DomainError):
            prune.predict_and_prune(np.ones(4), PruneSpec(0.5), mask=np.ones(3, bool))
