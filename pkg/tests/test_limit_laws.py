import itertools

import numpy as np
import pytest

from gaussqnet.gp_models import VarianceFunction
from gaussqnet.gp_sampler import seeds_for
from gaussqnet.limit_laws import (LimitLawSpec, build_pstar, build_sigma_matrix, class_time_changes,
                                  implied_covariance, pstar_exponent, sample_B, sample_limit_workload)
from gaussqnet.network import NetworkSpec, RLimits, RateSpec
from gaussqnet.workload import TruncationPlan

TIMES = (0.25, 0.5, 1.0)
PAIRS = list(itertools.product(TIMES, TIMES))


def example1(p=0.4):
    return NetworkSpec.from_triplets(3, [(1, 2, p), (1, 3, 1 - p)], [(1, 1), (0.8, 0.6), (1.2, 1 / 3)])


def example2(c=0.5, e=0.45):
    return NetworkSpec.from_triplets(3, [(1, 2, 0.4), (1, 3, 0.6)], [(1, 1), (1.4, e), (1.4 * c, e)])


def heavy_tandem(c=0.4):
    return NetworkSpec(np.array([[0.0, 0.5], [0.0, 0.0]]), (RateSpec(1.0, -0.5), RateSpec(c, -0.5)), "heavy")


def _cov_se(a, b):
    prod = a * b
    return prod.mean(), prod.std(ddof=1) / np.sqrt(prod.size)


class TestSigma:
    def test_diagonal(self):
        lls = LimitLawSpec.from_network(example2(), VarianceFunction.power(0.3))
        for t in (0.1, 1.0, 3.0):
            np.testing.assert_allclose(np.diag(build_sigma_matrix(lls, t, t)), t**0.6, rtol=1e-14)

    def test_zero_ratio(self):
        lls = LimitLawSpec.from_network(example1(), VarianceFunction.power(0.5))
        S = build_sigma_matrix(lls, 1.0, 0.7)
        assert S[0, 1] == S[0, 2] == S[1, 2] == S[2, 0] == 0.0

    def test_brownian_half_ratio(self):
        lls = LimitLawSpec.from_network(example2(0.5), VarianceFunction.power(0.5))
        assert lls.kappa_or_xi == pytest.approx(2.0)
        assert build_sigma_matrix(lls, 1.0, 1.0)[1, 2] == pytest.approx(0.5, rel=1e-14)

    def test_swap_symmetry(self):
        lls = LimitLawSpec.from_network(example2(0.3), VarianceFunction.power(0.3))
        for t, s in PAIRS:
            np.testing.assert_allclose(build_sigma_matrix(lls, t, s), build_sigma_matrix(lls, s, t).T, rtol=1e-14)

    @pytest.mark.parametrize("spec,vf", [(example2(0.5), VarianceFunction.power(0.3)),
                                         (heavy_tandem(), VarianceFunction.integrated_ou())])
    def test_class_construction_matches_sigma(self, spec, vf):
        lls = LimitLawSpec.from_network(spec, vf)
        for t, s in PAIRS:
            S = build_sigma_matrix(lls, t, s)
            for i, j in itertools.product(range(lls.n), repeat=2):
                assert implied_covariance(lls, i, j, t, s) == pytest.approx(S[i, j], rel=1e-12, abs=1e-15)

    def test_within_class_correlation_algebra(self):
        lls = LimitLawSpec.from_network(example2(0.5), VarianceFunction.power(0.3))
        S = build_sigma_matrix(lls, 1.0, 1.0)
        corr = implied_covariance(lls, 1, 2, 1.0, 1.0) / np.sqrt(
            implied_covariance(lls, 1, 1, 1.0, 1.0) * implied_covariance(lls, 2, 2, 1.0, 1.0))
        assert corr == pytest.approx(S[1, 2] / np.sqrt(S[1, 1] * S[2, 2]), rel=1e-14)

    def test_representative_is_unscaled(self):
        lls = LimitLawSpec.from_network(example2(0.5), VarianceFunction.power(0.3))
        scale, div = class_time_changes(lls)
        assert scale[0] == scale[1] == 1.0 and div[1] == 1.0
        assert scale[2] == pytest.approx(0.5 ** (-1 / 0.7))


class TestPstar:
    def test_example1_zero(self):
        lls = LimitLawSpec.from_network(example1(), VarianceFunction.power(0.5))
        np.testing.assert_array_equal(lls.Pstar, 0.0)

    def test_unit_ratios(self):
        P = np.array([[0, 0.3, 0.7], [0, 0, 0], [0, 0, 0]], dtype=float)
        rl = RLimits(np.triu(np.ones((3, 3))))
        np.testing.assert_array_equal(build_pstar(P, rl, 0.4, "light"), P)

    def test_brownian_quarter(self):
        P = np.array([[0, 0.5], [0, 0]])
        rl = RLimits(np.array([[1.0, 0.25], [0.0, 1.0]]))
        assert build_pstar(P, rl, 0.5, "light")[0, 1] == pytest.approx(0.125)

    def test_exponents(self):
        assert pstar_exponent(0.5, "light") == pytest.approx(1.0)
        assert pstar_exponent(0.25, "light") == pytest.approx(1 / 3)
        # heavy: -xi*alpha with xi = 1/(alpha-1)
        assert pstar_exponent(0.5, "heavy") == pytest.approx(1.0)

    def test_regime_parameters(self):
        light = LimitLawSpec.from_network(example2(), VarianceFunction.power(0.3))
        heavy = LimitLawSpec.from_network(heavy_tandem(), VarianceFunction.integrated_ou())
        assert light.kappa_or_xi == pytest.approx(1 / 0.7)
        assert heavy.kappa_or_xi == pytest.approx(-2.0)
        assert heavy.index == pytest.approx(0.5, abs=1e-3)

    def test_degenerate_index_rejected(self):
        with pytest.raises(ValueError, match="no non-degenerate"):
            LimitLawSpec.from_network(example1(), VarianceFunction.integrated_ou())


class TestSampleB:
    @pytest.mark.parametrize("spec,vf", [(example2(0.5), VarianceFunction.power(0.3)),
                                         (heavy_tandem(), VarianceFunction.power(0.7))],
                             ids=["light", "heavy"])
    def test_covariance_on_nine_pairs(self, spec, vf):
        lls = LimitLawSpec.from_network(spec, vf)
        dt, T_past = 0.25, 0.5
        rows = sample_B(lls, T_past, 1.0, dt, seeds_for(13, 10_000))
        col = {t: int(round((T_past + t) / dt)) for t in TIMES}
        bad = []
        for t, s in PAIRS:
            S = build_sigma_matrix(lls, t, s)
            for i, j in itertools.product(range(lls.n), repeat=2):
                c, se = _cov_se(rows[i][:, col[t]], rows[j][:, col[s]])
                if abs(c - S[i, j]) > 4 * se:
                    bad.append((i, j, t, s, c, S[i, j], se))
        assert not bad

    def test_anchored_at_zero(self):
        lls = LimitLawSpec.from_network(example2(0.5), VarianceFunction.power(0.3))
        rows = sample_B(lls, 1.0, 1.0, 0.25, seeds_for(1, 5))
        for r in rows:
            np.testing.assert_array_equal(r[:, 4], 0.0)

    def test_cross_class_independence(self):
        lls = LimitLawSpec.from_network(example2(0.5), VarianceFunction.power(0.3))
        rows = sample_B(lls, 0.0, 1.0, 0.25, seeds_for(17, 10_000))
        for j in (1, 2):
            c = np.corrcoef(rows[0][:, -1], rows[j][:, -1])[0, 1]
            assert abs(c) < 4 / np.sqrt(10_000)

    def test_unit_ratio_node_equals_driver(self):
        spec = NetworkSpec.from_triplets(2, [(1, 2, 0.5)], [(1, 1), (1, 1)])
        lls = LimitLawSpec.from_network(spec, VarianceFunction.power(0.3))
        rows = sample_B(lls, 0.5, 1.0, 0.25, seeds_for(2, 20))
        np.testing.assert_array_equal(rows[0], rows[1])

    def test_singletons_use_independent_streams(self):
        lls = LimitLawSpec.from_network(example1(), VarianceFunction.power(0.3))
        rows = sample_B(lls, 0.0, 1.0, 0.25, seeds_for(2, 3))
        assert not np.allclose(rows[0], rows[1])


class TestLimitWorkload:
    def test_zero_pstar_gives_q_equal_x(self):
        lls = LimitLawSpec.from_network(example1(), VarianceFunction.power(0.5))
        ws = sample_limit_workload(lls, 0.2, 0.05, seed=3, replicates=200, trunc=None, doubling_replicates=50)
        np.testing.assert_array_equal(ws.q, ws.xbar)
        assert np.all(ws.xbar >= 0)
        assert ws.u is None
        assert [p.T_past for p in ws.plans] == [90.0, 13.0, 31.0]

    def test_pstar_applied(self):
        spec = NetworkSpec.from_triplets(2, [(1, 2, 0.5)], [(1, 1), (0.25, 1)])
        lls = LimitLawSpec.from_network(spec, VarianceFunction.power(0.5))
        ws = sample_limit_workload(lls, 0.1, 0.05, seed=1, replicates=20, trunc=TruncationPlan(4.0, 0.0))
        np.testing.assert_allclose(ws.q[:, 1], ws.xbar[:, 1] - 0.125 * ws.xbar[:, 0], rtol=1e-12, atol=1e-14)

    def test_reproducible(self):
        lls = LimitLawSpec.from_network(example2(0.5), VarianceFunction.power(0.3))
        a = sample_limit_workload(lls, 0.1, 0.05, seed=8, replicates=30, doubling_replicates=10)
        b = sample_limit_workload(lls, 0.1, 0.05, seed=8, replicates=30, doubling_replicates=10)
        np.testing.assert_array_equal(a.q, b.q)
