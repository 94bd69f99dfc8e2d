import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_front_ranks
from optifab.optimizer.nsga2 import (
    crowding_distance,
    front_ranks,
    mogo_step,
    polynomial_mutation,
    run_nsga2,
    sbx_crossover,
    survival_select,
)
from optifab.problems import dtlz2_eval


def test_mutually_nondominated_population_is_one_front():
    pop = [(0.0, 1.0), (0.3, 0.6), (0.6, 0.3), (1.0, 0.0)]
    assert front_ranks(pop).tolist() == [0, 0, 0, 0]
    assert brute_front_ranks(pop) == [0, 0, 0, 0]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=30))
def test_ranks_match_brute_force(pts):
    assert front_ranks(pts).tolist() == brute_front_ranks(pts)


def test_extremes_get_infinite_crowding():
    front = np.array([[0.0, 1.0], [0.2, 0.7], [0.5, 0.5], [1.0, 0.0]])
    d = crowding_distance(front)
    assert np.isinf(d[0]) and np.isinf(d[3])
    assert np.all(np.isfinite(d[1:3]))
    # interior: normalized neighbour gaps summed over objectives
    assert d[1] == pytest.approx((0.5 - 0.0) / 1.0 + (1.0 - 0.5) / 1.0)


def test_small_front_all_infinite():
    assert np.all(np.isinf(crowding_distance(np.array([[0.0, 1.0], [1.0, 0.0]]))))


@pytest.mark.parametrize("p", [4, 8, 16])
def test_step_preserves_size_and_bounds(p):
    rng = np.random.default_rng(p)
    x = rng.random((p, 5))
    f = np.array([dtlz2_eval(row, 2) for row in x])
    kids = mogo_step(x, f, rng)
    assert kids.shape == x.shape
    assert np.all((kids >= 0) & (kids <= 1))


@pytest.mark.parametrize("p", [3, 5, 2])
def test_bad_population_rejected(p):
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="even"):
        mogo_step(rng.random((p, 3)), rng.random((p, 2)), rng)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=3, max_size=3), st.lists(st.floats(0, 1), min_size=3, max_size=3),
       st.integers(0, 2**32 - 1))
def test_variation_operators_stay_in_bounds(a, b, seed):
    rng = np.random.default_rng(seed)
    c1, c2 = sbx_crossover(np.array(a), np.array(b), rng)
    m = polynomial_mutation(c1, rng, rate=1.0)
    for v in (c1, c2, m):
        assert np.all((v >= 0) & (v <= 1))


def test_survival_keeps_first_front():
    f = np.array([[0.0, 1.0], [1.0, 0.0], [0.5, 0.5], [0.9, 0.9], [1.0, 1.0]])
    keep = survival_select(f, 3)
    assert sorted(keep.tolist()) == [0, 1, 2]


def test_generational_loop_improves_distance_to_front():
    gaps = []

    def record(gen, x, f):
        gaps.append(float(np.mean(np.linalg.norm(f, axis=1) - 1.0)))

    run_nsga2(lambda row: dtlz2_eval(row, 2), 6, 16, 15, seed=1, on_generation=record)
    assert gaps[-1] < gaps[0]
