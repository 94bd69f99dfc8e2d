import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_nondominated, hv_inclusion_exclusion, hv_staircase_2d
from optifab.pareto import (
    dominates,
    dtlz2_hypervolume_ceiling,
    hypervolume,
    hypervolume_exact,
    hypervolume_mc,
    pareto_filter,
)
from optifab.problems import true_front_sample


def as_set(points):
    return {tuple(map(float, p)) for p in points}


class TestDominance:
    def test_strict_in_one_component(self):
        assert dominates((1, 2), (1, 3))
        assert not dominates((1, 3), (1, 3))
        assert not dominates((0, 4), (1, 3))

    def test_filter_drops_dominated_point(self):
        front = pareto_filter([(1, 2), (2, 1), (1.5, 1.5), (2, 2)])
        assert as_set(front) == {(1, 2), (2, 1), (1.5, 1.5)}

    def test_duplicates_collapse(self):
        assert pareto_filter([(1, 1), (1, 1)]).tolist() == [[1.0, 1.0]]

    def test_matches_brute_force_on_random_cloud(self):
        pts = np.random.default_rng(3).random((50, 3))
        assert as_set(pareto_filter(pts)) == set(brute_nondominated(pts.tolist()))

    def test_mixed_lengths_rejected(self):
        with pytest.raises(ValueError, match="mixed"):
            pareto_filter([(1, 2), (1, 2, 3)])

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5), st.integers(0, 5)), min_size=1, max_size=25))
    def test_filter_property_on_integer_grids(self, pts):
        # integer grids produce many ties and duplicates, the awkward cases
        assert as_set(pareto_filter(pts)) == set(brute_nondominated(pts))


class TestExactHypervolume:
    def test_two_boxes(self):
        assert hypervolume_exact([(1, 0), (0, 1)], (2, 2)) == pytest.approx(3.0, abs=1e-12)

    def test_single_box_and_empty(self):
        assert hypervolume_exact([(0, 0)], (1, 1)) == 1.0
        assert hypervolume_exact([], (1, 1)) == 0.0

    def test_points_not_dominating_reference_are_clipped(self):
        assert hypervolume_exact([(0.5, 0.5), (1.0, 0.0), (3, -1)], (1, 1)) == pytest.approx(0.25)

    @pytest.mark.parametrize("m", [2, 3, 4])
    def test_against_inclusion_exclusion(self, m):
        rng = np.random.default_rng(m)
        for _ in range(20):
            k = int(rng.integers(1, 13))
            front = rng.random((k, m))
            ref = np.full(m, 1.1)
            assert hypervolume_exact(front, ref) == pytest.approx(hv_inclusion_exclusion(front, ref), abs=1e-12)

    def test_two_objectives_equals_staircase(self):
        rng = np.random.default_rng(11)
        for _ in range(30):
            front = rng.random((int(rng.integers(1, 30)), 2))
            assert hypervolume_exact(front, (1, 1)) == pytest.approx(hv_staircase_2d(front, (1, 1)), abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=10),
           st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1)))
    def test_adding_a_point_never_decreases(self, pts, extra):
        ref = (1.2, 1.2, 1.2)
        before = hypervolume_exact(pts, ref)
        after = hypervolume_exact(pts + [extra], ref)
        assert after >= before - 1e-12
        if any(dominates(p, extra) or tuple(p) == tuple(extra) for p in pts):
            assert after == pytest.approx(before, abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1)), min_size=2, max_size=10),
           st.randoms())
    def test_permutation_invariant(self, pts, rnd):
        shuffled = list(pts)
        rnd.shuffle(shuffled)
        ref = (1.1, 1.1, 1.1)
        assert hypervolume_exact(shuffled, ref) == pytest.approx(hypervolume_exact(pts, ref), abs=1e-12)


class TestMonteCarlo:
    def test_whole_box_has_zero_error(self):
        est, se = hypervolume_mc([(0, 0)], (1, 1), 100_000, seed=1)
        assert est == 1.0 and se == 0.0

    def test_two_boxes_within_three_se(self):
        est, se = hypervolume_mc([(1, 0), (0, 1)], (2, 2), 100_000, seed=2)
        assert abs(est - 3.0) <= 3 * se

    def test_sphere_front_matches_exact(self):
        front = true_front_sample("dtlz2", 50, seed=4, m=3)
        exact = hypervolume_exact(front, (1.1, 1.1, 1.1))
        est, se = hypervolume_mc(front, (1.1, 1.1, 1.1), 200_000, seed=5)
        assert abs(est - exact) <= 3 * se

    def test_deterministic_given_seed(self):
        front = np.random.default_rng(0).random((8, 5))
        assert hypervolume_mc(front, np.ones(5) * 1.1, 5000, seed=9) == hypervolume_mc(front, np.ones(5) * 1.1,
                                                                                       5000, seed=9)

    def test_rejects_small_sample(self):
        with pytest.raises(ValueError):
            hypervolume_mc([(0, 0)], (1, 1), 999)

    def test_fixed_box_estimate_is_monotone(self):
        rng = np.random.default_rng(6)
        ref = np.full(5, 1.1)
        pts = []
        last = 0.0
        for _ in range(15):
            pts.append(rng.random(5))
            est, _ = hypervolume_mc(pts, ref, 20_000, seed=3, lower=np.zeros(5))
            assert est >= last
            last = est

    def test_router_uses_exact_up_to_four_objectives(self):
        assert hypervolume([(1, 0), (0, 1)], (2, 2)) == (pytest.approx(3.0), 0.0)
        _, se = hypervolume([[0.2, 0.6, 0.5, 0.5, 0.5], [0.6, 0.2, 0.5, 0.5, 0.5]], np.ones(5), samples=2000)
        assert se > 0


class TestCeiling:
    def test_two_objectives(self):
        assert dtlz2_hypervolume_ceiling(2) == pytest.approx(1.21 - math.pi / 4, abs=1e-12)
        assert dtlz2_hypervolume_ceiling(2) == pytest.approx(0.42460, abs=1e-5)

    def test_three_objectives(self):
        assert dtlz2_hypervolume_ceiling(3) == pytest.approx(1.331 - math.pi / 6, abs=1e-12)
        assert dtlz2_hypervolume_ceiling(3) == pytest.approx(0.80740, abs=1e-5)

    def test_dense_front_approaches_ceiling_from_below(self):
        front = true_front_sample("dtlz2", 2000, m=2)
        hv = hypervolume_exact(front, (1.1, 1.1))
        assert hv <= dtlz2_hypervolume_ceiling(2)
        assert hv == pytest.approx(dtlz2_hypervolume_ceiling(2), abs=2e-3)
