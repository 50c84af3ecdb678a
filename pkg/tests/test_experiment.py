import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mi_updates import learners
from mi_updates.data import GaussianClasses, rng_for
from mi_updates.experiment import (ConfigError, ExperimentConfig, TrialRecord, baseline_generic,
                                   baseline_random, binomial_stderr, build_world, compute_metrics, exceeds_by,
                                   no_update_baselines, run_experiment)
from mi_updates.learners import Architecture, TrainConfig


def record(b, b_hat, a=1, a_hat=None, trial=0):
    return TrialRecord(trial, 0, "x", a, b, a_hat if b_hat else None, b_hat)


def small(**overrides):
    base = {
        "n0": 100, "n_up": 5, "worlds": 3, "seed": 1,
        "data": {"num_classes": 3, "dim": 5},
        "learner": {"initial": {"learning_rate": 0.1, "epochs": 5},
                    "update": {"learning_rate": 0.1, "epochs": 5, "batch_size": 5}},
        "attacks": [{"name": "diff"}, {"name": "coin", "kind": "random"}],
    }
    base.update(overrides)
    return ExperimentConfig.from_dict(base)


class TestMetrics:
    def test_all_correct(self):
        recs = [record(1, 1, a_hat=1), record(0, 0)]
        m = compute_metrics(recs)
        assert (m.accuracy, m.precision, m.recall, m.generic_accuracy, m.specific_accuracy) == (1, 1, 1, 1, 1)

    def test_always_in(self):
        recs = [record(1, 1, a_hat=1), record(0, 1, a_hat=1)] * 5
        m = compute_metrics(recs)
        assert m.recall == 1 and m.precision == 0.5

    def test_confusion_arithmetic(self):
        recs = [record(1, 1, a_hat=1)] * 2 + [record(0, 1, a_hat=1)] + [record(1, 0)] + [record(0, 0)] * 4
        m = compute_metrics(recs)
        assert m.precision == pytest.approx(2 / 3) and m.recall == pytest.approx(2 / 3)
        assert m.accuracy == 6 / 8
        assert (m.tp, m.fp, m.fn, m.tn) == (2, 1, 1, 4)

    def test_single_forced_member(self):
        assert compute_metrics([record(1, 1, a=3, a_hat=3)]).accuracy == 1.0

    def test_wrong_epoch_counts_generic_only(self):
        m = compute_metrics([record(1, 1, a=2, a_hat=1), record(0, 0)], k=2)
        assert m.generic_accuracy == 1.0 and m.specific_accuracy == 0.5
        assert m.per_epoch == {2: {"hit": 0, "wrong_epoch": 1, "missed": 0}}
        # OUT answers earn 1/k in the joint score.
        assert m.joint_accuracy == pytest.approx(0.25)

    def test_empty(self):
        with pytest.raises(ValueError):
            compute_metrics([])

    def test_record_validation(self):
        with pytest.raises(ValueError):
            TrialRecord(0, 0, "x", 1, 2, None, 0)
        with pytest.raises(ValueError):
            TrialRecord(0, 0, "x", 0, 1, None, 0)

    @given(st.lists(st.tuples(st.integers(1, 4), st.integers(0, 1), st.integers(0, 1), st.integers(1, 4)),
                    min_size=1, max_size=60))
    def test_consistency(self, rows):
        recs = [record(b, bh, a=a, a_hat=ah) for a, b, bh, ah in rows]
        m = compute_metrics(recs, k=4)
        assert m.specific_accuracy <= m.generic_accuracy
        assert m.joint_accuracy <= m.generic_accuracy
        assert m.accuracy == (m.tp + m.tn) / m.trials
        if m.tp + m.fp:
            assert m.precision == m.tp / (m.tp + m.fp)
        if m.tp + m.fn:
            assert m.recall == m.tp / (m.tp + m.fn)


class TestBaselines:
    @pytest.mark.parametrize("k,expected", [(1, 0.5), (4, 0.125), (10, 0.05)])
    def test_random(self, k, expected):
        assert baseline_random(k) == expected

    @pytest.mark.parametrize("p,k,expected", [(0.5, 2, 0.25), (1.0, 1, 1.0), (0.5, 8, 0.0625)])
    def test_generic(self, p, k, expected):
        assert baseline_generic(p, k) == expected

    def test_gap_correct_point_is_in(self):
        arch = Architecture.logistic(2, 2)
        model = learners.Model(arch, (np.array([[1.0, -1.0], [0.0, 0.0]]),), (np.zeros(2),))
        assert no_update_baselines(np.array([[1.0, 0.0]]), [0], model, "gap", {})[0] == 1
        assert no_update_baselines(np.array([[1.0, 0.0]]), [1], model, "gap", {})[0] == 0

    def test_loss_tie_is_out(self):
        model = learners.init_model(Architecture.logistic(2, 2))
        x, y = np.array([[0.3, 0.1]]), [1]
        at = float(learners.loss(model, x, y)[0])
        assert no_update_baselines(x, y, model, "loss", {"train_loss": at})[0] == 0

    def test_gap_accuracy_identity(self):
        dist = GaussianClasses.random(5, 20, 0.5, 1.0, seed=0)
        train, test = dist.sample(200, rng_for(0, 1)), dist.sample(200, rng_for(0, 2))
        model = learners.train_initial(Architecture.logistic(20, 5), TrainConfig(0.1, 30, 32), train)
        b_in = no_update_baselines(train.features, train.labels, model, "gap", {})
        b_out = no_update_baselines(test.features, test.labels, model, "gap", {})
        acc = 0.5 * (b_in.mean() + 1 - b_out.mean())
        expected = 0.5 * (learners.accuracy(model, train) + 1 - learners.accuracy(model, test))
        assert acc == pytest.approx(expected, abs=1e-12)

    def test_unknown_and_missing_calibration(self):
        model = learners.init_model(Architecture.logistic(2, 2))
        with pytest.raises(ValueError):
            no_update_baselines(np.zeros((1, 2)), [0], model, "loss", {})
        with pytest.raises(ValueError):
            no_update_baselines(np.zeros((1, 2)), [0], model, "entropy", {})


class TestConfig:
    def test_multi_needs_two_updates(self):
        with pytest.raises(ValueError):
            small(instantiation="multi", k=1)

    def test_single_needs_one_update(self):
        with pytest.raises(ValueError):
            small(k=2)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="colour"):
            small(colour="blue")
        with pytest.raises(ConfigError, match="learner"):
            small(learner={"hiden": [4]})

    def test_shift_requires_section(self):
        with pytest.raises(ValueError):
            small(instantiation="shift")

    def test_lira_needs_shadows(self):
        with pytest.raises(ValueError):
            small(shadows=2, attacks=[{"name": "l", "score": "lira"}])

    def test_duplicate_names(self):
        with pytest.raises(ValueError):
            small(attacks=[{"name": "a"}, {"name": "a"}])

    def test_roundtrip(self):
        cfg = small(instantiation="multi", k=3)
        assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
        json.dumps(cfg.to_dict())

    def test_trials(self):
        cfg = small()
        assert cfg.points == 10 and cfg.trials == 30


class TestRuns:
    def test_seed_determinism(self):
        a, b = run_experiment(small()), run_experiment(small())
        assert a.records_jsonl() == b.records_jsonl()
        assert {k: v.to_dict() for k, v in a.reports.items()} == {k: v.to_dict() for k, v in b.reports.items()}

    def test_workers_do_not_change_results(self):
        assert run_experiment(small(), workers=2).records_jsonl() == run_experiment(small()).records_jsonl()

    def test_seed_changes_results(self):
        assert run_experiment(small()).records_jsonl() != run_experiment(small(seed=2)).records_jsonl()

    def test_coin_flip(self):
        res = run_experiment(small(worlds=20, attacks=[{"name": "coin", "kind": "random"}]))
        n = res.reports["coin"].trials
        assert abs(res.reports["coin"].accuracy - 0.5) <= 3 / (2 * math.sqrt(n))

    def test_challenge_balance(self):
        cfg = small(instantiation="multi", k=4, worlds=20, attacks=[{"name": "coin", "kind": "random"}])
        recs = run_experiment(cfg).records
        b = np.array([r.b for r in recs])
        assert abs(b.mean() - 0.5) <= 3 / (2 * math.sqrt(len(b)))
        counts = np.bincount([r.a for r in recs], minlength=5)[1:]
        # Chi-square statistic against uniform over [k], 3 degrees of freedom; 16.3 is the 0.999 quantile.
        expected = len(recs) / 4
        assert ((counts - expected) ** 2 / expected).sum() < 16.3

    def test_challenge_all_covers_candidates(self):
        cfg = small(challenge="all", worlds=1)
        recs = [r for r in run_experiment(cfg).records if r.attack == "diff"]
        assert len(recs) == 2 * cfg.n_up and sum(r.b for r in recs) == cfg.n_up

    def test_members_drawn_from_update_sets(self):
        cfg = small(instantiation="multi", k=3, worlds=1)
        world = build_world(cfg, 0)
        epochs = world.candidate_epochs
        assert np.bincount(epochs).tolist() == [3 * cfg.n_up] + [cfg.n_up] * 3

    def test_multi_attacks_run(self):
        cfg = small(instantiation="multi", k=3, attacks=[
            {"name": "bf", "kind": "back_front", "combiner": "ratio"},
            {"name": "delta", "kind": "delta", "combiner": "ratio"},
            {"name": "gap", "kind": "baseline", "baseline": "gap"}])
        res = run_experiment(cfg)
        for rep in res.reports.values():
            assert rep.specific_accuracy <= rep.generic_accuracy
        assert all(r.a_hat is None or 1 <= r.a_hat <= 3 for r in res.records)

    def test_shift_runs(self):
        cfg = small(instantiation="shift", shift={"alpha": 0.5, "target": "easy"})
        assert run_experiment(cfg).reports["diff"].trials == cfg.trials

    @pytest.mark.slow
    def test_transfer_close_to_batch(self):
        cfg = small(worlds=6, n0=300, n_up=10, challenge="all", shadows=4, attacks=[
            {"name": "batch", "combiner": "ratio"},
            {"name": "transfer", "combiner": "ratio", "threshold": "transfer"}])
        res = run_experiment(cfg)
        assert abs(res.reports["batch"].accuracy - res.reports["transfer"].accuracy) <= 0.05 + \
            3 * binomial_stderr(0.5, res.reports["batch"].trials)

    def test_rank_threshold_runs(self):
        cfg = small(attacks=[{"name": "rank", "threshold": "rank", "q": 0.2}])
        assert run_experiment(cfg).reports["rank"].trials == cfg.trials


class TestSignificance:
    def test_exceeds_by(self):
        ok, stat = exceeds_by(0.8, 1000, 0.6, 1000, margin=0.05)
        assert ok and stat > 5
        assert not exceeds_by(0.62, 100, 0.6, 100)[0]

    @settings(max_examples=30)
    @given(st.floats(0, 1), st.integers(1, 10000))
    def test_stderr(self, p, n):
        assert binomial_stderr(p, n) == pytest.approx(math.sqrt(p * (1 - p) / n))
