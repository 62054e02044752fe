import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selfvs.data import VideoSample, equal_segments
from selfvs.errors import DatasetError, DimensionError, UndefinedMetricError, ValidationError
from selfvs.evaluation import (MetricsReport, aggregate_reports, evaluate_dataset, evaluate_video, f_score,
                               generate_summary, kendall_tau, knapsack_select, spearman_rho)


# -- brute-force oracles -----------------------------------------------------

def tau_b_oracle(x, y):
    c = d = tx = ty = 0
    n = len(x)
    for i in range(n):
        for j in range(i + 1, n):
            dx, dy = x[i] - x[j], y[i] - y[j]
            if dx == 0 and dy == 0:
                continue
            if dx == 0:
                tx += 1
            elif dy == 0:
                ty += 1
            elif (dx > 0) == (dy > 0):
                c += 1
            else:
                d += 1
    return (c - d) / math.sqrt((c + d + tx) * (c + d + ty))


def average_ranks(x):
    return [1 + sum(v < xi for v in x) + (sum(v == xi for v in x) - 1) / 2 for xi in x]


def rho_oracle(x, y):
    rx, ry = np.array(average_ranks(x)), np.array(average_ranks(y))
    rx, ry = rx - rx.mean(), ry - ry.mean()
    return float((rx @ ry) / math.sqrt((rx @ rx) * (ry @ ry)))


def knapsack_oracle(values, weights, capacity):
    best_value, best_set = -math.inf, None
    m = len(values)
    for r in range(m + 1):
        for combo in itertools.combinations(range(m), r):
            if sum(weights[i] for i in combo) > capacity:
                continue
            v = sum(values[i] for i in combo)
            if v > best_value or (v == best_value and combo < best_set):
                best_value, best_set = v, combo
    return list(best_set)


def random_pair(rng, n):
    # small integer alphabets guarantee ties on both sides
    while True:
        x = rng.integers(0, max(2, n // 3), n).astype(float)
        y = rng.integers(0, max(2, n // 2), n).astype(float)
        if len(set(x)) > 1 and len(set(y)) > 1:
            return x, y


class TestKendall:
    def test_identity_and_reversal(self):
        x = np.array([0.3, 0.1, 0.9, 0.5])
        assert kendall_tau(x, x) == 1.0
        assert kendall_tau(x, -x) == -1.0

    def test_worked_example(self):
        assert kendall_tau([1, 3, 2, 4], [1, 2, 3, 4]) == pytest.approx(4 / 6, abs=1e-15)

    def test_matches_oracle_with_ties(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            x, y = random_pair(rng, int(rng.integers(2, 51)))
            assert abs(kendall_tau(x, y) - tau_b_oracle(x, y)) < 1e-12

    def test_undefined_cases(self):
        with pytest.raises(UndefinedMetricError):
            kendall_tau([1.0], [2.0])
        with pytest.raises(UndefinedMetricError):
            kendall_tau([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            kendall_tau([1.0, 2.0], [1.0, 2.0, 3.0])


class TestSpearman:
    def test_identity_and_reversal(self):
        x = np.arange(6.0)
        assert spearman_rho(x, x) == pytest.approx(1.0, abs=1e-15)
        assert spearman_rho(x, x[::-1]) == pytest.approx(-1.0, abs=1e-15)

    def test_worked_example(self):
        assert spearman_rho([1, 3, 2], [1, 2, 3]) == pytest.approx(0.5, abs=1e-15)

    def test_matches_oracle_with_ties(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            x, y = random_pair(rng, int(rng.integers(2, 51)))
            assert abs(spearman_rho(x, y) - rho_oracle(x, y)) < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-100, 100), min_size=3, max_size=30), st.integers(0, 2**31 - 1))
def test_rank_metrics_invariant_under_increasing_maps(pred, seed):
    pred = np.array(pred, dtype=float)
    gt = np.random.default_rng(seed).permutation(len(pred)).astype(float)
    warped = np.exp(pred / 50.0) * 3 + 1
    if len(set(pred)) < 2:
        return
    assert abs(kendall_tau(warped, gt) - kendall_tau(pred, gt)) < 1e-12
    assert abs(spearman_rho(warped, gt) - spearman_rho(pred, gt)) < 1e-12


class TestKnapsack:
    def test_zero_capacity(self):
        assert knapsack_select([5.0, 1.0], [1, 1], 0) == []

    def test_everything_fits(self):
        assert knapsack_select([1.0, 2.0, 3.0], [1, 2, 3], 6) == [0, 1, 2]

    def test_worked_example(self):
        assert knapsack_select([6, 10, 12], [1, 2, 3], 5) == [1, 2]

    def test_tie_prefers_smaller_indices(self):
        assert knapsack_select([1.0, 1.0, 1.0], [1, 1, 1], 2) == [0, 1]
        assert knapsack_select([0.0, 0.0], [1, 1], 2) == []
        assert knapsack_select([2.0, 1.0, 1.0], [2, 1, 1], 2) == [0]

    def test_exhaustive_agreement(self):
        rng = np.random.default_rng(2)
        for trial in range(500):
            m = int(rng.integers(1, 13))
            weights = [int(w) for w in rng.integers(1, 7, m)]
            # integer values make exact ties common, so the tie-break rule is exercised
            values = [float(v) for v in rng.integers(0, 5, m)] if trial % 2 else list(rng.uniform(0, 1, m))
            cap = int(rng.integers(0, sum(weights) + 2))
            assert knapsack_select(values, weights, cap) == knapsack_oracle(values, weights, cap), (values, weights, cap)

    def test_rejects_bad_weights(self):
        with pytest.raises(ValueError):
            knapsack_select([1.0], [0], 3)


class TestSummary:
    def test_full_budget_selects_all(self):
        sel = generate_summary(np.linspace(0, 1, 10), [(0, 10)], 1.0)
        assert sel.frames == list(range(10)) and sel.total_frames == 10

    def test_nothing_fits(self):
        sel = generate_summary(np.ones(10), [(0, 5), (5, 10)], 0.2)
        assert sel.segments == [] and sel.frames == [] and sel.budget == 2

    def test_favored_segments(self):
        scores = np.array([0.9] * 3 + [0.1] * 3 + [0.2] * 3 + [0.8] * 3)
        sel = generate_summary(scores, equal_segments(12, 3), 0.5)
        assert sel.segments == [0, 3]
        assert sel.frames == [0, 1, 2, 9, 10, 11]

    def test_mean_not_sum(self):
        # a long mediocre segment loses to a short strong one
        scores = np.array([0.5] * 6 + [0.9])
        assert generate_summary(scores, [(0, 6), (6, 7)], 1.0).segments == [0, 1]
        # summed scores would pick segment 0 (3.0 > 0.9) at a six-frame budget
        assert generate_summary(scores, [(0, 6), (6, 7)], 6.5 / 7).segments == [1]

    def test_budget_floor(self):
        assert generate_summary(np.ones(32), equal_segments(32, 5), 0.15).budget == 4

    def test_budget_survives_float_products(self):
        # 0.29 * 100 evaluates to 28.999999999999996
        assert generate_summary(np.ones(100), equal_segments(100, 1), 0.29).budget == 29

    def test_invalid_segments(self):
        with pytest.raises(ValidationError):
            generate_summary(np.ones(6), [(0, 4), (3, 6)], 0.5)

    def test_invalid_budget(self):
        with pytest.raises(ValueError):
            generate_summary(np.ones(6), [(0, 6)], 0.0)


class TestFScore:
    def test_identical(self):
        assert f_score({1, 2, 3}, {1, 2, 3}) == (1.0, 1.0, 1.0)

    def test_disjoint(self):
        assert f_score({1, 2}, {3, 4}) == (0.0, 0.0, 0.0)

    def test_worked_example(self):
        p, r, f = f_score(range(15, 25), range(0, 20))
        assert (p, r) == (0.5, 0.25)
        assert f == pytest.approx(1 / 3, abs=1e-15)

    def test_empty_generated(self):
        assert f_score(set(), {1}) == (0.0, 0.0, 0.0)

    def test_both_empty(self):
        with pytest.raises(UndefinedMetricError):
            f_score(set(), set())

    @settings(max_examples=50, deadline=None)
    @given(st.sets(st.integers(0, 30), min_size=1), st.sets(st.integers(0, 30), min_size=1))
    def test_swap_symmetry(self, a, b):
        p, r, f = f_score(a, b)
        p2, r2, f2 = f_score(b, a)
        assert (p, r) == (r2, p2) and f == f2


def sample_with(annotations, n=20, seg=2):
    return VideoSample("v", np.zeros((n, 2)), user_annotations=np.asarray(annotations, dtype=float),
                       segments=equal_segments(n, seg))


class TestEvaluateVideo:
    def test_identical_annotators(self):
        pred = np.random.default_rng(0).uniform(size=20)
        m = evaluate_video(pred, sample_with([pred, pred]))
        assert m.tau == 1.0 and m.rho == pytest.approx(1.0, abs=1e-15) and m.f_score == 1.0
        assert m.flags == []

    def test_opposite_annotators_cancel(self):
        pred = np.random.default_rng(1).uniform(size=20)
        m = evaluate_video(pred, sample_with([pred, 1 - pred]))
        assert m.tau == pytest.approx(0.0, abs=1e-15)
        assert m.rho == pytest.approx(0.0, abs=1e-15)

    def test_decomposes_over_annotators(self):
        rng = np.random.default_rng(2)
        pred, ann = rng.uniform(size=20), rng.uniform(size=(3, 20))
        joint = evaluate_video(pred, sample_with(ann))
        singles = [evaluate_video(pred, sample_with(ann[u:u + 1])) for u in range(3)]
        for key in ("tau", "rho", "precision", "recall", "f_score"):
            assert getattr(joint, key) == pytest.approx(np.mean([getattr(s, key) for s in singles]), abs=1e-15)

    def test_constant_prediction_flagged(self):
        m = evaluate_video(np.full(20, 0.5), sample_with(np.random.default_rng(3).uniform(size=(2, 20))))
        assert math.isnan(m.tau) and math.isnan(m.rho)
        assert m.flags == ["rank_undefined:annotator0", "rank_undefined:annotator1"]

    def test_constant_annotator_excluded_from_mean(self):
        rng = np.random.default_rng(4)
        pred, good = rng.uniform(size=20), rng.uniform(size=20)
        m = evaluate_video(pred, sample_with([good, np.full(20, 0.3)]))
        assert m.tau == pytest.approx(kendall_tau(pred, good), abs=1e-15)
        assert m.flags == ["rank_undefined:annotator1"]

    def test_missing_annotations(self):
        with pytest.raises(DatasetError):
            evaluate_video(np.ones(4), VideoSample("v", np.zeros((4, 2)), segments=[(0, 4)]))

    def test_prediction_length(self):
        with pytest.raises(DimensionError):
            evaluate_video(np.ones(5), sample_with(np.ones((1, 20))))


class TestReport:
    def make(self, seed=0, n_videos=4):
        rng = np.random.default_rng(seed)
        samples = [VideoSample(f"v{i}", np.zeros((20, 2)), user_annotations=rng.uniform(size=(3, 20)),
                               segments=equal_segments(20, 2)) for i in range(n_videos)]
        preds = {s.id: rng.uniform(size=20) for s in samples}
        return evaluate_dataset(preds, samples, metadata={"split": 0})

    def test_means_are_averages(self):
        rep = self.make()
        for key, value in rep.means.items():
            assert value == pytest.approx(np.mean([getattr(v, key) for v in rep.videos]), abs=1e-15)

    def test_ranges(self):
        for v in self.make(1).videos:
            assert -1 <= v.tau <= 1 and -1 <= v.rho <= 1
            assert all(0 <= getattr(v, k) <= 1 for k in ("precision", "recall", "f_score"))

    def test_json_schema_and_round_trip(self):
        rep = self.make(2)
        doc = json.loads(rep.to_json())
        assert set(doc) == {"videos", "means", "metadata"}
        assert set(doc["videos"][0]) == {"id", "tau", "rho", "precision", "recall", "f_score", "flags"}
        assert doc["metadata"]["split"] == 0 and doc["metadata"]["budget_ratio"] == 0.15
        back = MetricsReport.from_dict(doc)
        assert back.means == rep.means

    def test_nan_becomes_null(self):
        samples = [sample_with(np.random.default_rng(0).uniform(size=(1, 20)))]
        rep = evaluate_dataset({"v": np.zeros(20)}, samples)
        doc = json.loads(rep.to_json())
        assert doc["videos"][0]["tau"] is None and doc["means"]["tau"] is None

    def test_csv_rows(self):
        rep = self.make(3)
        lines = rep.to_csv().split("\n")
        assert lines[0] == "id,tau,rho,precision,recall,f_score"
        assert len(lines) == 4 + 2 and lines[-1] == ""
        assert float(lines[1].split(",")[1]) == rep.videos[0].tau

    def test_aggregate(self):
        reps = [self.make(s) for s in range(3)]
        agg = aggregate_reports(reps)
        assert agg["n_splits"] == 3
        assert agg["means"]["f_score"] == pytest.approx(np.mean([r.means["f_score"] for r in reps]), abs=1e-15)
