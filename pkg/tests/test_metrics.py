from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volsense import metrics as mt

from _oracles import auc_pairs


def test_soft_vote_mean():
    p = mt.soft_vote(["a", "a", "a"], [1, 1, 1], [0.2, 0.4, 0.9])
    assert p.subject_probs[0] == pytest.approx(0.5, abs=1e-15)


def test_soft_vote_single_sample_unchanged():
    p = mt.soft_vote(["a", "b"], [0, 1], [0.123, 0.77])
    assert list(p.subject_ids) == ["a", "b"]
    assert list(p.subject_probs) == [0.123, 0.77]


@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.randoms(use_true_random=False))
@settings(max_examples=50, deadline=None)
def test_soft_vote_order_invariant(probs, rnd):
    shuffled = probs[:]
    rnd.shuffle(shuffled)
    a = mt.soft_vote(["s"] * len(probs), [1] * len(probs), probs)
    b = mt.soft_vote(["s"] * len(probs), [1] * len(probs), shuffled)
    assert a.subject_probs[0] == b.subject_probs[0]


def test_soft_vote_rejects_conflicting_labels():
    with pytest.raises(ValueError, match="conflicting"):
        mt.soft_vote(["a", "a"], [0, 1], [0.1, 0.2])


def test_vote_then_threshold_is_threshold_of_mean():
    rng = np.random.default_rng(0)
    ids = rng.integers(0, 6, 60).astype(str)
    labels = np.array([int(i) % 2 for i in ids])
    probs = rng.random(60)
    p = mt.soft_vote(ids, labels, probs)
    for sid, sp in zip(p.subject_ids, p.subject_probs):
        assert (sp >= 0.5) == (probs[ids == sid].mean() >= 0.5)


class TestF1:
    def test_perfect(self):
        assert mt.f1_score([1, 0, 1], [0.9, 0.1, 0.5]) == 1.0

    def test_precision_recall_example(self):
        # tp=36, fp=9, fn=4: precision 0.8, recall 0.9
        assert mt.f1_from_counts(36, 9, 4) == pytest.approx(2 * 0.72 / 1.7, abs=1e-12)
        assert round(mt.f1_from_counts(36, 9, 4), 4) == 0.8471

    def test_zero_denominator(self):
        assert mt.f1_score([1, 1, 0], [0.1, 0.2, 0.3]) == 0.0
        preds = mt.soft_vote(["a", "b"], [1, 0], [0.1, 0.2])
        assert mt.evaluate(preds).f1_degenerate

    def test_half_is_positive(self):
        assert mt.confusion([1], [0.5]) == (1, 0, 0, 0)

    @given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
    def test_counts_match_formula(self, tp, fp, fn):
        f1 = mt.f1_from_counts(tp, fp, fn)
        if tp == 0:
            assert f1 == 0.0
        else:
            p, r = Fraction(tp, tp + fp), Fraction(tp, tp + fn)
            assert f1 == pytest.approx(float(2 * (p * r) / (p + r)), abs=1e-15)


class TestAuc:
    def test_separated(self):
        assert mt.auc_roc([0, 0, 1, 1], [0.1, 0.2, 0.3, 0.4]) == 1.0

    def test_all_tied(self):
        assert mt.auc_roc([0, 1, 0, 1, 1], [0.5] * 5) == 0.5

    def test_pair_example(self):
        assert mt.auc_roc([1, 1, 0, 0], [0.9, 0.4, 0.5, 0.1]) == 0.75

    def test_single_class(self):
        with pytest.raises(ValueError, match="both classes"):
            mt.auc_roc([1, 1], [0.2, 0.3])

    @given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 20)), min_size=2, max_size=200))
    @settings(max_examples=100, deadline=None)
    def test_ranks_match_pairs(self, rows):
        labels = [y for y, _ in rows]
        if len(set(labels)) < 2:
            return
        scores = [s / 20 for _, s in rows]
        assert abs(mt.auc_roc(labels, scores) - float(auc_pairs(labels, scores))) <= 1e-12

    def test_monotone_invariance(self):
        rng = np.random.default_rng(1)
        y = rng.integers(0, 2, 100)
        s = rng.random(100)
        a = mt.auc_roc(y, s)
        assert mt.auc_roc(y, np.exp(3 * s) - 7) == a
        assert mt.auc_roc(y, s ** 3) == a


class TestAggregation:
    def report(self, f1, auc):
        return mt.EvalReport(f1, auc, 1, 1, 1, 1)

    def test_mean_std_cell(self):
        s = mt.aggregate_runs([self.report(0.8, 0.8), self.report(0.9, 0.9)])
        assert s.metrics["f1"].cell() == "0.85 (0.07)"
        assert s.metrics["f1"].std == pytest.approx(0.0707107, abs=1e-6)

    def test_identical_runs(self):
        s = mt.aggregate_runs([self.report(0.7, 0.7)] * 3)
        assert s.metrics["auc"].cell() == "0.70 (0.00)"

    def test_single_run_has_no_std(self):
        s = mt.aggregate_runs([self.report(0.7, 0.6)])
        assert s.metrics["auc"].std is None and s.metrics["auc"].cell() == "0.60"

    def test_order_invariant(self):
        vals = list(np.random.default_rng(2).random(10))
        a = mt.aggregate_runs([self.report(v, v) for v in vals])
        b = mt.aggregate_runs([self.report(v, v) for v in reversed(vals)])
        assert a == b

    def test_table(self):
        s = mt.aggregate_runs([self.report(0.8, 0.8), self.report(0.9, 0.9)])
        table = mt.format_table([("CNN", "fMRI", s)])
        assert table == "method,features,n_runs,f1,auc\nCNN,fMRI,2,0.85 (0.07),0.85 (0.07)\n"


def test_report_text_round_trip():
    r = mt.evaluate(mt.soft_vote(["a", "b", "c"], [1, 0, 1], [0.9, 0.3, 0.4]))
    assert (r.tp, r.fp, r.tn, r.fn) == (1, 0, 1, 1)
    assert r.n_subjects == 3
    assert mt.EvalReport.from_text(r.to_text()) == r
