import numpy as np
import pytest
from hypothesis import given, strategies as st

from gaussqnet.gp_models import VarianceFunction
from gaussqnet.limit_laws import LimitLawSpec
from gaussqnet.network import NetworkSpec, RateSpec
from gaussqnet.scaling import DeltaMemo, DeltaSolveError, check_delta_rv, pstar_prelimit, scale_factors, solve_delta

POWER_SUM = VarianceFunction.power_sum([0.6, 1.4])
IOU = VarianceFunction.integrated_ou()
SHIPPED = [VarianceFunction.power(0.5), VarianceFunction.power(0.2), VarianceFunction.power(0.8), POWER_SUM, IOU]


def residual(vf, x, d):
    return abs(x * d / float(vf.sigma(d)) - 1.0)


def tandem(c2, e2=1.0, p=0.5, regime="light", e1=1.0):
    return NetworkSpec(np.array([[0.0, p], [0.0, 0.0]]), (RateSpec(1.0, e1), RateSpec(c2, e2)), regime)


class TestSolveDelta:
    def test_brownian(self):
        assert solve_delta(VarianceFunction.power(0.5), 10.0) == pytest.approx(0.01, rel=1e-12)

    def test_hurst_three_quarters(self):
        assert solve_delta(VarianceFunction.power(0.75), 16.0) == pytest.approx(16.0**-4, rel=1e-10)

    def test_power_sum_residual(self):
        assert residual(POWER_SUM, 10.0, solve_delta(POWER_SUM, 10.0)) < 1e-12

    @pytest.mark.parametrize("vf", SHIPPED)
    def test_residual_on_geometric_grid(self, vf):
        # d/sigma(d) >= 1 for the integrated OU input, so roots exist only for x < 1
        hi = 0.99 if vf is IOU else 1e6
        worst = max(residual(vf, x, solve_delta(vf, x)) for x in np.geomspace(1e-6, hi, 100))
        assert worst < 1e-12

    @given(st.floats(0.05, 0.95), st.floats(1e-8, 1e8))
    def test_power_closed_form(self, lam, x):
        vf = VarianceFunction.power(lam)
        assert solve_delta(vf, x) == pytest.approx(x ** (-1.0 / (1.0 - lam)), rel=1e-10)

    def test_nonpositive_x(self):
        with pytest.raises(ValueError):
            solve_delta(POWER_SUM, 0.0)

    def test_iou_light_has_no_root(self):
        with pytest.raises(DeltaSolveError):
            solve_delta(IOU, 10.0)

    def test_no_root(self):
        # sigma(t) = t makes x*d/sigma(d) = x constant, so only x = 1 has a root
        with pytest.raises(DeltaSolveError):
            solve_delta(VarianceFunction.power_sum([2.0]), 3.0)

    def test_memo(self):
        memo = DeltaMemo(POWER_SUM, "light")
        a = memo(12.5)
        assert memo(12.5) == a == solve_delta(POWER_SUM, 12.5, "light")
        assert len(memo._cache) == 1


class TestDeltaRV:
    def test_brownian(self):
        assert check_delta_rv(VarianceFunction.power(0.5), "light") == pytest.approx(-2.0, abs=1e-6)

    def test_hurst_three_quarters(self):
        assert check_delta_rv(VarianceFunction.power(0.75), "light") == pytest.approx(-4.0, abs=1e-6)

    def test_power_sum_light(self):
        assert check_delta_rv(POWER_SUM, "light") == pytest.approx(-10.0 / 7.0, abs=1e-3)

    def test_iou_heavy(self):
        assert check_delta_rv(IOU, "heavy") == pytest.approx(1.0 / (0.5 - 1.0), abs=1e-3)

    def test_unsettled_slope(self):
        with pytest.raises(DeltaSolveError, match="settle"):
            check_delta_rv(POWER_SUM, "light", anchor=-2.0, spread_tol=1e-4)


class TestScaleFactors:
    def test_brownian_single_node(self):
        spec = NetworkSpec(np.zeros((1, 1)), (RateSpec(1.0, 1.0),))
        sf = scale_factors(spec, VarianceFunction.power(0.5), 10.0)
        np.testing.assert_allclose(sf.time_scale, [0.01], rtol=1e-12)
        np.testing.assert_allclose(sf.space_scale, [0.1], rtol=1e-12)

    @pytest.mark.parametrize("vf", SHIPPED[:4])
    def test_identity(self, vf):
        spec = NetworkSpec(np.zeros((1, 1)), (RateSpec(2.0, 0.7),))
        sf = scale_factors(spec, vf, 123.0)
        assert abs(sf.rates[0] * sf.time_scale[0] / sf.space_scale[0] - 1.0) < 1e-12

    def test_example1_ordered_inversely(self):
        spec = NetworkSpec.from_triplets(3, [(1, 2, 0.4), (1, 3, 0.6)], [(1, 1), (0.8, 0.6), (1.2, 1 / 3)])
        sf = scale_factors(spec, VarianceFunction.power(0.5), 100.0)
        order = np.argsort(-sf.rates)
        assert np.all(np.diff(sf.time_scale[order]) > 0)
        assert np.all(np.diff(sf.space_scale[order]) > 0)


class TestPstarPrelimit:
    def test_example1_vanishes(self):
        spec = NetworkSpec.from_triplets(3, [(1, 2, 0.4), (1, 3, 0.6)], [(1, 1), (0.8, 0.6), (1.2, 1 / 3)])
        vals = [pstar_prelimit(spec, VarianceFunction.power(0.5), u).max() for u in (1e2, 1e4, 1e6)]
        assert vals[0] > vals[1] > vals[2]
        assert vals[2] < 1e-2

    def test_equal_rates(self):
        spec = tandem(1.0)
        for u in (1.0, 10.0, 1e5):
            np.testing.assert_allclose(pstar_prelimit(spec, POWER_SUM, u), spec.P, rtol=1e-12)

    def test_brownian_tandem(self):
        spec = tandem(0.25)
        lls = LimitLawSpec.from_network(spec, VarianceFunction.power(0.5))
        assert lls.Pstar[0, 1] == pytest.approx(0.125, rel=1e-12)
        assert pstar_prelimit(spec, VarianceFunction.power(0.5), 50.0)[0, 1] == pytest.approx(0.125, rel=1e-10)

    def test_mixed_power_gap_decreases(self):
        spec = tandem(0.25)
        lls = LimitLawSpec.from_network(spec, POWER_SUM)
        gaps = [np.abs(pstar_prelimit(spec, POWER_SUM, u) - lls.Pstar).max() for u in np.geomspace(10, 1e5, 9)]
        assert np.all(np.diff(gaps) < 0)

    def test_heavy_converges(self):
        spec = tandem(0.4, e2=-0.5, e1=-0.5, regime="heavy")
        lls = LimitLawSpec.from_network(spec, IOU)
        assert lls.Pstar[0, 1] == pytest.approx(0.5 * 0.4, rel=1e-12)
        gaps = [abs(pstar_prelimit(spec, IOU, u)[0, 1] - lls.Pstar[0, 1]) for u in np.geomspace(10, 1e6, 6)]
        assert np.all(np.diff(gaps) < 0)
        assert gaps[-1] < 1e-3
