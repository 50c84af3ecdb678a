import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mi_updates import attacks as atk
from mi_updates import learners
from mi_updates.attacks import (IN, OUT, Combiner, MultiUpdateDecision, ZeroOneTable, calibrate_batch,
                                calibrate_rank, calibrate_transfer, decide, delta_attack, delta_decisions,
                                delta_thresholds, optimal_01_attack, score_diff, score_ratio)
from mi_updates.data import Dataset
from mi_updates.learners import Architecture, UpdateTrace
from mi_updates.mean_lab import grad_step_mean, l2sq_loss
from mi_updates.scores import LossScore, ShadowSet

finite = st.floats(0, 1e3, allow_nan=False)


def sq_score(model, x, y, stage=0):
    """l2^2 loss of a mean-estimation 'model' (a vector)."""
    return l2sq_loss(x, model)


class TestCombiners:
    def test_identical_models(self):
        f = np.array([1.0, 2.0])
        x = np.array([0.0, 3.0])
        assert score_diff(x, None, f, f, sq_score) == 0.0
        assert score_ratio(x, None, f, f, sq_score) == 1.0

    def test_surrogate_closed_forms(self):
        # One SGD-New step on a single point with eta = 0.25 scales the l2^2 loss by (1 - 2 eta)^2.
        rng = np.random.default_rng(0)
        f0, x = rng.normal(size=5), rng.normal(size=5)
        f1 = grad_step_mean(f0, x[None], None, 0.25)
        l0 = l2sq_loss(x, f0)
        assert score_diff(x, None, f0, f1, sq_score) == pytest.approx(-0.75 * l0, rel=1e-12)
        assert score_ratio(x, None, f0, f1, sq_score, c=1e-12) == pytest.approx(0.25, rel=1e-9)

    def test_antisymmetry(self):
        rng = np.random.default_rng(1)
        f0, f1, x = rng.normal(size=(3, 4))
        assert score_diff(x, None, f0, f1, sq_score) == -score_diff(x, None, f1, f0, sq_score)

    def test_ratio_of_zero_losses(self):
        assert Combiner("ratio", 1e-6)(0.0, 0.0) == 1.0
        assert Combiner("ratio", 5.0)(0.0, 0.0) == 1.0

    def test_ratio_requires_positive_damping(self):
        with pytest.raises(ValueError):
            Combiner("ratio", 0.0)
        with pytest.raises(ValueError):
            score_ratio(np.zeros(2), None, np.zeros(2), np.zeros(2), sq_score, c=-1)

    @given(finite, finite)
    def test_large_damping_limit(self, a, b):
        assert Combiner("ratio", 1e15)(a, b) == pytest.approx(1.0, abs=1e-9)

    @given(st.floats(1e-3, 1e3), finite, st.floats(1e-3, 10))
    def test_monotone_in_after(self, before, after, step):
        for comb in (Combiner("diff"), Combiner("ratio")):
            assert comb(before, after + step) > comb(before, after)

    def test_vectorized(self):
        out = Combiner("diff")(np.array([1.0, 2.0]), np.array([0.5, 3.0]))
        assert out.tolist() == [-0.5, 1.0]


class TestThresholds:
    def test_batch_median(self):
        assert calibrate_batch([1, 2, 3], "accuracy") == 2

    def test_batch_precision_percentile(self):
        assert calibrate_batch(np.arange(1, 101), "precision") == pytest.approx(10.9, abs=1e-12)

    def test_single_score(self):
        assert calibrate_batch([4.2], "accuracy") == 4.2
        assert calibrate_batch([4.2], "precision") == 4.2

    def test_rank(self):
        scores = np.random.default_rng(0).normal(size=101)
        assert calibrate_rank(scores, 0.5) == np.median(scores)
        assert calibrate_rank(np.arange(1, 101), 0.1) == pytest.approx(10.9, abs=1e-12)
        with pytest.raises(ValueError):
            calibrate_rank(scores, 1.0)

    def test_rank_false_positive_rate(self):
        rng = np.random.default_rng(5)
        q, n = 0.1, 4000
        t = calibrate_rank(rng.normal(size=200_000), q)
        fpr = np.mean(decide(rng.normal(size=n), t))
        assert abs(fpr - q) <= 3 * math.sqrt(q * (1 - q) / n)

    def test_empty(self):
        with pytest.raises(ValueError):
            calibrate_batch([])

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50), st.floats(-1e3, 1e3))
    def test_translation_equivariance(self, xs, delta):
        a = calibrate_batch(np.array(xs) + delta, "precision")
        assert a == pytest.approx(calibrate_batch(xs, "precision") + delta, abs=1e-6)


def tiny_trace():
    arch = Architecture.logistic(3, 2)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(20, 3))
    y = (x[:, 0] > 0).astype(int)
    d0 = Dataset(x, y, 2)
    d1 = Dataset(x[:6] + 0.1, y[:6], 2)
    f0 = learners.train_initial(arch, learners.TrainConfig(0.5, 5, 5), d0)
    f1 = learners.train(f0, d1, learners.TrainConfig(0.5, 6, 5))
    return UpdateTrace(d0, [f0, f1], [d1]), Dataset(np.concatenate([d1.features, x[10:16]]),
                                                     np.concatenate([d1.labels, y[10:16]]), 2)


class TestTransfer:
    def test_degenerate_transfer_equals_batch(self):
        trace, batch = tiny_trace()
        shadows = ShadowSet(batch, (tuple(trace.models),), np.zeros((1, 12), bool),
                            np.zeros((2, 12)), np.ones((2, 12)), np.ones((2, 12)))
        comb = Combiner("diff")
        values = atk.combined_scores(batch.features, batch.labels, *trace.models, LossScore(), comb)
        assert calibrate_transfer(shadows, comb, LossScore()) == calibrate_batch(values)

    def test_shifted_shadow_scores_shift_threshold(self):
        trace, batch = tiny_trace()
        shadows = ShadowSet(batch, (tuple(trace.models),), np.zeros((1, 12), bool),
                            np.zeros((2, 12)), np.ones((2, 12)), np.ones((2, 12)))

        def shifted(model, x, y, stage=0):
            return learners.loss(model, x, y) + 0.37 * stage

        comb = Combiner("diff")
        base = calibrate_transfer(shadows, comb, LossScore(), "precision")
        assert calibrate_transfer(shadows, comb, shifted, "precision") == pytest.approx(base + 0.37, abs=1e-12)


class TestDecide:
    def test_tie_is_out(self):
        assert decide(1.5, 1.5) == OUT

    def test_below_is_in(self):
        assert decide(1.5 - 1e-12, 1.5) == IN

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=30), st.floats(-1e6, 1e6))
    def test_strict_rule(self, xs, t):
        assert np.array_equal(decide(np.array(xs), t), (np.array(xs) < t).astype(int))

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=60, unique=True))
    def test_median_splits_batch(self, xs):
        assert decide(np.array(xs), calibrate_batch(xs)).sum() == len(xs) // 2


class TestBackFront:
    def test_single_update_reduction(self):
        trace, batch = tiny_trace()
        comb = Combiner("ratio")
        values = atk.combined_scores(batch.features, batch.labels, *trace.models, LossScore(), comb)
        t = calibrate_batch(values)
        assert np.array_equal(atk.back_front(batch.features, batch.labels, trace, comb, LossScore(), t),
                              decide(values, t))

    def test_no_signal(self):
        trace, batch = tiny_trace()
        frozen = UpdateTrace(trace.initial_set, [trace.models[0], trace.models[0]], trace.update_sets)
        comb = Combiner("diff")
        values = atk.combined_scores(batch.features, batch.labels, *frozen.models, LossScore(), comb)
        decisions = atk.back_front(batch.features, batch.labels, frozen, comb, LossScore(), calibrate_batch(values))
        assert not decisions.any()
        truth = np.r_[np.ones(6), np.zeros(6)]
        assert np.mean(decisions == truth) == 0.5


class StageScore:
    """Score whose value depends only on the trace stage, for scripted Delta scans."""

    name = "scripted"

    def __init__(self, values):
        self.values = values

    def __call__(self, model, x, y, stage=0):
        return self.values[stage]


def scripted_trace(k):
    arch = Architecture.logistic(1, 2)
    m = learners.init_model(arch)
    d = Dataset(np.zeros((1, 1)), [0], 2)
    return UpdateTrace(d, [m] * (k + 1), [d] * k)


class TestDelta:
    def test_k1_boundary(self):
        scores = np.array([[5.0, 1.0, 3.0, 2.0, 4.0]])
        assert delta_thresholds(scores, 2) == [2.5]

    def test_assigns_n_up_per_epoch(self):
        rng = np.random.default_rng(3)
        scores = rng.normal(size=(4, 81))
        t = delta_thresholds(scores, 20)
        epochs = delta_decisions(scores, t)
        assert [int(np.sum(epochs == i)) for i in range(1, 5)] == [20] * 4

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 10), st.integers(1, 10), st.integers(0, 2**32 - 1))
    def test_assignment_property(self, k, n_up, extra, seed):
        scores = np.random.default_rng(seed).normal(size=(k, k * n_up + extra))
        epochs = delta_decisions(scores, delta_thresholds(scores, n_up))
        assert all(int(np.sum(epochs == i)) == n_up for i in range(1, k + 1))

    def test_fresh_draw_counts(self):
        # IN points of epoch i have a lowered score on pair i; calibrate once, count on fresh draws.
        k, n_up = 3, 25

        def draw(rng):
            s = rng.normal(size=(k, 2 * k * n_up))
            for i in range(k):
                s[i, i * n_up:(i + 1) * n_up] -= 2.0
            return s

        rng = np.random.default_rng(8)
        t = delta_thresholds(draw(rng), n_up)
        for _ in range(20):
            epochs = delta_decisions(draw(rng), t)
            for i in range(1, k + 1):
                assert abs(np.sum(epochs == i) - n_up) <= 3 * math.sqrt(n_up)

    def test_too_small_batch(self):
        with pytest.raises(ValueError):
            delta_thresholds(np.zeros((2, 4)), 2)

    def test_all_above_is_out(self):
        trace = scripted_trace(4)
        score = StageScore([0.0, 1.0, 2.0, 3.0, 4.0])  # every pair diff = 1
        assert delta_attack(None, None, trace, Combiner("diff"), score, [0.5] * 4) == MultiUpdateDecision(OUT)

    def test_single_hit(self):
        trace = scripted_trace(4)
        score = StageScore([0.0, 1.0, 2.0, 0.0, 1.0])  # diffs 1, 1, -2, 1
        assert delta_attack(None, None, trace, Combiner("diff"), score, [0.0] * 4) == MultiUpdateDecision(IN, 3)

    def test_first_match(self):
        trace = scripted_trace(4)
        score = StageScore([0.0, 1.0, 0.0, 1.0, 0.0])  # diffs 1, -1, 1, -1
        assert delta_attack(None, None, trace, Combiner("diff"), score, [0.0] * 4) == MultiUpdateDecision(IN, 2)

    def test_threshold_count_mismatch(self):
        with pytest.raises(ValueError):
            delta_attack(None, None, scripted_trace(2), Combiner("diff"), StageScore([0, 0, 0]), [0.0])

    def test_decision_invariant(self):
        with pytest.raises(ValueError):
            MultiUpdateDecision(IN)
        with pytest.raises(ValueError):
            MultiUpdateDecision(OUT, 2)


def sample_table(rng):
    """Random table meeting both assumptions, by construction plus rejection."""
    while True:
        acc0 = rng.uniform()
        u11, t11 = rng.uniform(0, acc0, size=2)
        u01, t01 = rng.uniform(0, 1 - acc0, size=2)
        table = ZeroOneTable(u11, acc0 - u11, u01, 1 - acc0 - u01, t11, acc0 - t11, t01, 1 - acc0 - t01)
        if table.satisfies_assumptions():
            return table


class TestZeroOne:
    def test_invalid_table(self):
        with pytest.raises(ValueError):
            ZeroOneTable(0.5, 0.5, 0.5, 0, 0.25, 0.25, 0.25, 0.25)

    def test_indistinguishable(self):
        p = (0.4, 0.1, 0.3, 0.2)
        table = ZeroOneTable(*p, *p)
        assert optimal_01_attack(table, True)[1] == pytest.approx(0.5)
        assert optimal_01_attack(table, False)[1] == pytest.approx(0.5)

    def test_updates_do_not_help_on_sampled_tables(self):
        rng = np.random.default_rng(2024)
        for _ in range(10_000):
            table = sample_table(rng)
            with_map, with_acc = optimal_01_attack(table, True)
            _, without_acc = optimal_01_attack(table, False)
            assert with_acc == without_acc
            assert with_map == {"11": IN, "01": IN, "10": OUT, "00": OUT}

    def test_violating_first_assumption_helps(self):
        table = ZeroOneTable(0.5, 0.4, 0.08, 0.02, 0.3, 0.2, 0.2, 0.3)
        assert not table.satisfies_assumptions()
        _, with_acc = optimal_01_attack(table, True)
        _, without_acc = optimal_01_attack(table, False)
        # Closed forms: half the sum of the larger mass in each observable cell group.
        assert with_acc == pytest.approx(0.5 * (0.5 + 0.4 + 0.2 + 0.3))
        assert without_acc == pytest.approx(0.5 * (max(0.58, 0.5) + max(0.42, 0.5)))
        assert with_acc > without_acc
