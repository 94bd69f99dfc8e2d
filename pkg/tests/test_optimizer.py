import numpy as np
import pytest

from oracles import brute_nondominated
from optifab.optimizer.acquisition import ei_at
from optifab.optimizer.core import (
    DesignSpace,
    Optimizer,
    OptimizerConfig,
    OptimizerError,
    refit_interval,
)
from optifab.problems import dtlz2_eval


def unit_space(n):
    return DesignSpace(np.tile([0.0, 1.0], (n, 1)))


def make(n=4, m=2, **kw):
    events = []
    cfg = OptimizerConfig(**{"max_trials": 40, "rng_seed": 3, "acquisition_restarts": 4, **kw})
    return Optimizer(unit_space(n), m, cfg, listener=lambda k, p: events.append((k, p))), events


def drive(opt, trials, q=1, m=2):
    """Propose/tell DTLZ2 in synchronous batches; returns every proposed design."""
    designs = []
    while len(opt.trials) < trials:
        batch = opt.propose(min(q, trials - len(opt.trials)))
        start = len(opt.trials) - len(batch)
        for k, x in enumerate(batch):
            opt.tell(start + k, dtlz2_eval(x, m))
        designs.extend(batch)
    return designs


class TestPropose:
    def test_initial_batch_distinct_and_in_bounds(self):
        opt, _ = make(init_count=8)
        pts = opt.propose(4)
        assert len(pts) == 4
        assert all(opt.space.contains(p) for p in pts)
        assert len({tuple(p) for p in pts}) == 4

    def test_mogo_initial_population_distinct_in_one_call(self):
        opt, _ = make(strategy="mogo", population_size=8, batch_size=8)
        pts = opt.propose(8)
        assert len({tuple(p) for p in pts}) == 8
        np.testing.assert_array_equal(np.array(pts), opt._sobol)

    def test_trial_ids_consecutive(self):
        opt, _ = make(init_count=3)
        opt.propose(2)
        opt.propose(3)
        assert [t.trial_id for t in opt.trials] == list(range(5))

    def test_scaled_bounds(self):
        space = DesignSpace(np.array([[-5.0, 5.0], [10.0, 20.0]]))
        opt = Optimizer(space, 2, OptimizerConfig(max_trials=10, init_count=4))
        for p in opt.propose(4):
            assert space.contains(p)

    def test_rejects_bad_q_and_overflow(self):
        opt, _ = make(max_trials=5, init_count=4)
        with pytest.raises(ValueError):
            opt.propose(0)
        opt.propose(4)
        with pytest.raises(OptimizerError, match="max_trials"):
            opt.propose(2)

    @pytest.mark.parametrize("strategy", ["mobo", "mogo"])
    def test_deterministic_sequence(self, strategy):
        a = drive(make(strategy=strategy, init_count=6)[0], 20, q=2)
        b = drive(make(strategy=strategy, init_count=6)[0], 20, q=2)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_different_seed_differs(self):
        a = drive(make(init_count=6)[0], 10)
        b = drive(make(init_count=6, rng_seed=4)[0], 10)
        assert not all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_proposal_beats_random_probe_for_same_weight(self):
        opt, _ = make(n=3, init_count=8, acquisition_restarts=8)
        drive(opt, 20)
        opt.propose(1)
        last = opt.last_proposal
        probes = np.random.default_rng(11).random((1000, 3))
        value = float(ei_at(last["gp"], last["best"], last["unit"][None, :])[0])
        assert value >= ei_at(last["gp"], last["best"], probes).max()


class TestTell:
    def test_archive_membership(self):
        opt, _ = make(init_count=4)
        opt.propose(3)
        opt.tell(0, [0.7, 0.7])
        assert opt.archive_objectives().tolist() == [[0.7, 0.7]]
        opt.tell(1, [0.8, 0.8])
        assert opt.archive_objectives().tolist() == [[0.7, 0.7]]
        opt.tell(2, [0.1, 0.9])
        assert sorted(opt.archive_objectives().tolist()) == [[0.1, 0.9], [0.7, 0.7]]

    def test_invalid_counts_but_leaves_archive(self):
        opt, _ = make(init_count=4)
        opt.propose(2)
        opt.tell(0, [0.5, 0.5])
        opt.tell(1, "invalid")
        assert opt.archive_objectives().tolist() == [[0.5, 0.5]]
        assert opt.counts()["invalid"] == 1 and opt.tell_count == 2

    def test_identical_double_tell_is_noop(self):
        opt, _ = make(init_count=4)
        opt.propose(1)
        opt.tell(0, [0.5, 0.5])
        opt.tell(0, [0.5, 0.5])
        assert opt.tell_count == 1

    def test_conflicting_double_tell_errors(self):
        opt, _ = make(init_count=4)
        opt.propose(1)
        opt.tell(0, [0.5, 0.5])
        with pytest.raises(OptimizerError):
            opt.tell(0, "failed")

    def test_unknown_trial_and_bad_outcomes(self):
        opt, _ = make(init_count=4)
        opt.propose(1)
        with pytest.raises(KeyError):
            opt.tell(5, [0.1, 0.2])
        with pytest.raises(ValueError):
            opt.tell(0, [0.1])
        with pytest.raises(ValueError):
            opt.tell(0, [0.1, float("nan")])
        with pytest.raises(ValueError):
            opt.tell(0, "lost")

    def test_archive_equals_brute_force_front(self):
        opt, _ = make(n=5, m=3, max_trials=120, init_count=10, strategy="mogo", population_size=12)
        drive(opt, 120, q=4, m=3)
        all_f = [tuple(t.objectives) for t in opt.trials if t.status == "valid"]
        assert {tuple(f) for f in opt.archive_objectives().tolist()} == set(brute_nondominated(all_f))


class TestRefitSchedule:
    def test_interval(self):
        assert [refit_interval(t) for t in (0, 49, 50, 200)] == [1, 1, 5, 5]

    def test_refits_follow_schedule(self):
        opt, events = make(n=2, max_trials=62, init_count=4, acquisition_restarts=2)
        drive(opt, 62)
        refit_tells = [p["tell_count"] for k, p in events if k == "model_refit"]
        early = [t for t in refit_tells if t < 50]
        assert early == list(range(4, 50))
        gaps = np.diff([early[-1]] + [t for t in refit_tells if t >= 50])
        assert gaps.tolist() == [5, 5]


class TestConfig:
    @pytest.mark.parametrize("kw, field", [
        ({"strategy": "grid"}, "strategy"),
        ({"batch_size": 0}, "batch_size"),
        ({"max_trials": 3, "init_count": 4}, "init_count"),
        ({"strategy": "mogo", "population_size": 5}, "population_size"),
        ({"rng_seed": -1}, "rng_seed"),
    ])
    def test_invalid_fields_named(self, kw, field):
        with pytest.raises(ValueError, match=field):
            OptimizerConfig(**kw).validate(4)

    def test_default_init_count(self):
        assert OptimizerConfig().resolved_init_count(100) == 32
        assert OptimizerConfig().resolved_init_count(6) == 12
