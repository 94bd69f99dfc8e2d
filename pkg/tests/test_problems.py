import math
import time

import numpy as np
import pytest

from optifab.pareto import pareto_filter
from optifab.problems import (
    ProblemSpec,
    detector_definition,
    detector_denormalize,
    detector_excluded,
    detector_toy_eval,
    dtlz2_eval,
    evaluate,
    true_front_sample,
)


class TestDTLZ2:
    def test_midpoint_of_two_objective_front(self):
        f = dtlz2_eval([0.5, 0.5], 2)
        np.testing.assert_allclose(f, [math.cos(math.pi / 4), math.sin(math.pi / 4)], atol=1e-12)
        np.testing.assert_allclose(f, [0.70711, 0.70711], atol=1e-5)

    def test_boundary_of_front(self):
        np.testing.assert_allclose(dtlz2_eval([0.0, 0.5], 2), [1.0, 0.0], atol=1e-15)

    def test_large_instance_distance_function(self):
        x = np.concatenate([np.zeros(4), np.ones(96)])
        f = dtlz2_eval(x, 5)
        assert f[0] == pytest.approx(25.0)  # g = 96 * 0.25
        np.testing.assert_allclose(f[1:], 0.0, atol=1e-12)

    def test_three_objective_formula_by_hand(self):
        x = np.array([0.3, 0.6, 0.2, 0.9])
        g = (0.2 - 0.5) ** 2 + (0.9 - 0.5) ** 2
        a, b = 0.3 * math.pi / 2, 0.6 * math.pi / 2
        expected = [(1 + g) * math.cos(a) * math.cos(b), (1 + g) * math.cos(a) * math.sin(b), (1 + g) * math.sin(a)]
        np.testing.assert_allclose(dtlz2_eval(x, 3), expected, atol=1e-12)

    def test_squared_norm_is_one_plus_g_squared(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            x = rng.random(8)
            g = np.sum((x[2:] - 0.5) ** 2)
            f = dtlz2_eval(x, 3)
            assert np.sum(f**2) == pytest.approx((1 + g) ** 2, rel=1e-12)
            assert np.all(f >= 0) and np.all(f <= 1 + 0.25 * 6)

    def test_out_of_bounds_rejected(self):
        with pytest.raises(ValueError):
            dtlz2_eval([1.2, 0.5], 2)

    def test_spec_requires_n_at_least_m(self):
        with pytest.raises(ValueError, match="problem.n"):
            ProblemSpec("dtlz2", n=2, m=3).validate()


class TestTrueFront:
    def test_stratified_two_objective_sample(self):
        pts = true_front_sample("dtlz2", 3, m=2)
        expected = [(1.0, 0.0), (math.sqrt(2) / 2, math.sqrt(2) / 2), (0.0, 1.0)]
        np.testing.assert_allclose(pts, expected, atol=1e-12)

    @pytest.mark.parametrize("m", [2, 3, 5])
    def test_points_on_unit_sphere_and_mutually_nondominated(self, m):
        pts = true_front_sample("dtlz2", 40, seed=1, m=m)
        np.testing.assert_allclose(np.sum(pts**2, axis=1), 1.0, atol=1e-12)
        assert len(pareto_filter(pts)) == len(pts)

    def test_unsupported_problem(self):
        with pytest.raises(ValueError):
            true_front_sample("detector-toy", 5, m=3)


class TestDetectorToy:
    def test_exclusion_center_is_invalid(self):
        center = detector_definition()["exclusion"]["center"]
        outcome = detector_toy_eval(detector_denormalize(center))
        assert outcome.status == "invalid" and outcome.objectives is None

    def test_anchor_matches_golden_values(self):
        anchor = detector_definition()["anchor"]
        x = detector_denormalize(anchor["normalized"])
        np.testing.assert_allclose(x, anchor["physical"], rtol=1e-12)
        outcome = detector_toy_eval(x)
        assert outcome.status == "valid"
        np.testing.assert_allclose(outcome.objectives, anchor["objectives"], rtol=1e-12)

    def test_exclusion_volume_is_ten_percent(self):
        u = np.random.default_rng(77).random((10_000, 7))
        rate = np.mean([detector_excluded(row) for row in u])
        assert rate == pytest.approx(0.10, abs=0.01)

    def test_objectives_bounded(self):
        u = np.random.default_rng(2).random((500, 7))
        for row in u:
            outcome = detector_toy_eval(detector_denormalize(row), ProblemSpec("detector-toy", 7, 3, "none"))
            assert outcome.status == "valid"
            assert all(0.0 <= f <= 1.0 for f in outcome.objectives)

    def test_constraint_mode_none_disables_check(self):
        center = detector_definition()["exclusion"]["center"]
        spec = ProblemSpec("detector-toy", 7, 3, "none")
        assert detector_toy_eval(detector_denormalize(center), spec).status == "valid"

    def test_fixed_shape(self):
        with pytest.raises(ValueError, match="n=7"):
            ProblemSpec("detector-toy", 6, 3).validate()


def test_eval_delay_is_a_lower_bound_on_wall_time():
    spec = ProblemSpec("dtlz2", 4, 2, eval_delay=0.2)
    t0 = time.monotonic()
    outcome = evaluate(spec, np.full(4, 0.5))
    assert time.monotonic() - t0 >= 0.2
    assert outcome.eval_duration >= 0.2
