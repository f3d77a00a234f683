import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gaussqnet.gp_models import VarianceFunction
from gaussqnet.network import (NetworkSpec, RateSpec, RelabelRequired, RLimits, check_assumptions, compute_C,
                               compute_r_limits, partition_classes, relabel, validate_topology)


def example1(p=0.4):
    return NetworkSpec.from_triplets(3, [(1, 2, p), (1, 3, 1 - p)], [(1, 1), (0.8, 0.6), (1.2, 1 / 3)])


def example2(c=0.5):
    return NetworkSpec.from_triplets(3, [(1, 2, 0.4), (1, 3, 0.6)], [(1, 1), (1.4, 0.45), (1.4 * c, 0.45)])


def tree_matrices(n):
    """Every feedforward tree on n nodes: one parent per column, parent index below the column."""
    for parents in itertools.product(*[range(j) for j in range(1, n)]):
        P = np.zeros((n, n))
        for j, i in enumerate(parents, start=1):
            P[i, j] = 1.0
        rs = P.sum(axis=1, keepdims=True)
        yield np.divide(P, rs, out=np.zeros_like(P), where=rs > 0)


class TestTopology:
    def test_example1_passes(self):
        assert validate_topology(example1().P) == []

    def test_lower_entry(self):
        P = np.zeros((2, 2))
        P[1, 0] = 1.0
        msgs = validate_topology(P)
        assert any("not strictly upper-triangular" in m for m in msgs)

    def test_two_parents(self):
        P = np.zeros((3, 3))
        P[0, 2] = 0.5
        P[1, 2] = 0.5
        P[0, 1] = 0.5
        assert any("column 3 has 2 positive entries" in m for m in validate_topology(P))

    def test_orphan_column_and_row_sum(self):
        P = np.array([[0, 0.7, 0.7], [0, 0, 0], [0, 0, 0]], dtype=float)
        msgs = validate_topology(P)
        assert any("row 1 sums to 1.4" in m for m in msgs)
        P = np.array([[0, 1.0, 0], [0, 0, 0], [0, 0, 0]], dtype=float)
        assert any("column 3 has 0" in m for m in validate_topology(P))

    def test_all_violations_listed(self):
        P = np.array([[0, 2.0], [1.0, 0]])
        assert len(validate_topology(P)) >= 2


class TestC:
    def test_example1(self):
        np.testing.assert_allclose(compute_C(example1().P), [1.0, 0.4, 0.6], rtol=1e-15)

    def test_tandem(self):
        np.testing.assert_array_equal(compute_C(np.array([[0.0, 1.0], [0.0, 0.0]])), [1.0, 1.0])

    def test_single(self):
        np.testing.assert_array_equal(compute_C(np.zeros((1, 1))), [1.0])

    @given(st.integers(1, 7), st.integers(0, 10_000))
    def test_residual(self, n, seed):
        rng = np.random.default_rng(seed)
        P = np.zeros((n, n))
        for j in range(1, n):
            P[rng.integers(0, j), j] = rng.uniform(0.01, 1.0)
        P /= np.maximum(P.sum(axis=1, keepdims=True), 1.0)
        C = compute_C(P)
        e1 = np.eye(n)[0]
        assert np.max(np.abs((np.eye(n) - P.T) @ C - e1)) < 1e-12


class TestRLimits:
    def test_example1_zero(self):
        r = compute_r_limits(example1()).r
        np.testing.assert_array_equal(np.diag(r), 1.0)
        assert r[0, 1] == r[0, 2] == r[1, 2] == 0.0

    def test_example2(self):
        r = compute_r_limits(example2(0.5)).r
        assert r[1, 2] == pytest.approx(0.5)
        assert r[0, 1] == r[0, 2] == 0.0

    def test_identical_rates(self):
        spec = NetworkSpec(np.zeros((3, 3)), tuple(RateSpec(2.0, 0.5) for _ in range(3)))
        np.testing.assert_array_equal(np.triu(compute_r_limits(spec).r), np.triu(np.ones((3, 3))))

    def test_relabel_required(self):
        spec = NetworkSpec(np.zeros((2, 2)), (RateSpec(1, 1), RateSpec(1, 2)))
        with pytest.raises(RelabelRequired, match="relabel"):
            compute_r_limits(spec)

    def test_heavy_decay(self):
        spec = NetworkSpec(np.array([[0, 0.5], [0, 0]]), (RateSpec(1, -0.5), RateSpec(1, -0.8)), "heavy")
        assert compute_r_limits(spec).r[0, 1] == 0.0

    @given(st.lists(st.tuples(st.sampled_from([0.3, 0.5, 0.9]), st.floats(0.1, 10.0)), min_size=1, max_size=6))
    def test_cocycle(self, rates):
        spec = NetworkSpec(np.zeros((len(rates), len(rates))), tuple(RateSpec(c, e) for e, c in rates))
        _, spec = relabel(spec)
        r = compute_r_limits(spec).r
        n = spec.n
        for i, j, k in itertools.combinations(range(n), 3):
            if r[i, j] > 0 and r[j, k] > 0:
                assert r[i, j] * r[j, k] == pytest.approx(r[i, k], rel=1e-12)


class TestRelabel:
    def test_identity_when_ordered(self):
        perm, spec = relabel(example1())
        np.testing.assert_array_equal(perm, [0, 1, 2])
        np.testing.assert_array_equal(spec.P, example1().P)

    def test_two_node_swap(self):
        spec = NetworkSpec(np.zeros((2, 2)), (RateSpec(1, 1), RateSpec(1, 2)))
        perm, new = relabel(spec)
        np.testing.assert_array_equal(perm, [1, 0])
        assert compute_r_limits(new).r[0, 1] == 0.0

    def test_example2_identity(self):
        np.testing.assert_array_equal(relabel(example2())[0], [0, 1, 2])

    def test_ties_keep_original_order(self):
        spec = NetworkSpec(np.zeros((3, 3)), tuple(RateSpec(1.0, 0.5) for _ in range(3)))
        np.testing.assert_array_equal(relabel(spec)[0], [0, 1, 2])

    @given(st.lists(st.tuples(st.sampled_from([0.2, 0.6, 1.0]), st.sampled_from([0.5, 1.0, 2.0])),
                    min_size=1, max_size=6))
    def test_idempotent(self, rates):
        spec = NetworkSpec(np.zeros((len(rates), len(rates))), tuple(RateSpec(c, e) for e, c in rates))
        _, once = relabel(spec)
        perm, twice = relabel(once)
        np.testing.assert_array_equal(perm, np.arange(len(rates)))
        compute_r_limits(twice)

    def test_n1_violation_detected(self):
        # downstream node 2 faster than node 1: relabeling would put it first
        spec = NetworkSpec(np.array([[0, 1.0], [0, 0]]), (RateSpec(1, 0.5), RateSpec(1, 1.0)))
        with pytest.raises(RuntimeError, match="N1"):
            relabel(spec)


class TestPartition:
    def test_example1_singletons(self):
        part = partition_classes(compute_r_limits(example1()))
        assert part.classes == ((0,), (1,), (2,))

    def test_example2(self):
        part = partition_classes(compute_r_limits(example2()))
        assert part.classes == ((0,), (1, 2))
        assert part.k[2] == 1
        assert part.f == (0, 1, 1)
        assert part.l == (0, 1)

    def test_single_class(self):
        part = partition_classes(RLimits(np.triu(np.ones((4, 4)))))
        assert part.classes == ((0, 1, 2, 3),)
        assert part.k == (0, 0, 0, 0)

    @pytest.mark.parametrize("n", range(1, 7))
    def test_brute_force_closure(self, n):
        rng = np.random.default_rng(n)
        for _ in range(40):
            r = np.triu(rng.uniform(0, 1, (n, n)) * (rng.uniform(size=(n, n)) < 0.3), 1) + np.eye(n)
            adj = (r > 0) | (r.T > 0)
            reach = adj.copy()
            for m in range(n):
                reach |= reach[:, [m]] & reach[[m], :]
            part = partition_classes(RLimits(r))
            for i in range(n):
                for j in range(n):
                    assert (part.f[i] == part.f[j]) == bool(reach[i, j])
            for c, members in enumerate(part.classes):
                assert part.l[c] == min(members)


class TestAssumptions:
    def test_example1_all_pass(self):
        rep = check_assumptions(example1(), VarianceFunction.power(0.5))
        assert rep.passed, rep.lines()
        assert {c.name for c in rep.checks} >= {"topology", "N1", "N2", "N3", "L1", "L2"}

    def test_tandem_n1_fails(self):
        spec = NetworkSpec(np.array([[0, 1.0], [0, 0]]), (RateSpec(1, 0.5), RateSpec(2, 0.5)))
        rep = check_assumptions(spec)
        assert not rep.passed
        assert not next(c for c in rep.checks if c.name == "N1").passed

    def test_iou_light_degenerate_warning(self):
        rep = check_assumptions(example1(), VarianceFunction.integrated_ou())
        assert any("degenerate" in w for w in rep.warnings)
        assert not next(c for c in rep.checks if c.name == "L1").passed

    def test_heavy_iou(self):
        spec = NetworkSpec(np.array([[0, 0.5], [0, 0]]), (RateSpec(1, -0.5), RateSpec(0.4, -0.5)), "heavy")
        rep = check_assumptions(spec, VarianceFunction.integrated_ou())
        assert rep.passed, rep.lines()

    def test_regime_sign(self):
        spec = NetworkSpec(np.zeros((1, 1)), (RateSpec(1, -1),), "light")
        rep = check_assumptions(spec)
        assert not next(c for c in rep.checks if c.name == "regime").passed

    def test_report_serializes(self):
        d = check_assumptions(example1()).to_dict()
        assert d["passed"] is True and isinstance(d["checks"], list)

    @pytest.mark.parametrize("n", [2, 3, 4, 5])
    def test_all_trees_validate(self, n):
        for P in tree_matrices(n):
            assert validate_topology(P) == []
