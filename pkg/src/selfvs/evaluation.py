"""Rank correlation, budgeted keyframe summaries, F-score and per-video reports."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .data import VideoSample, validate_segments
from .errors import DatasetError, DimensionError, UndefinedMetricError

DEFAULT_BUDGET = 0.15


def _check_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 1:
        raise DimensionError(f"score vectors must be 1-D and equal length, got {pred.shape} and {gt.shape}")
    if pred.shape[0] < 2:
        raise UndefinedMetricError("rank correlation needs at least two frames")
    if np.all(pred == pred[0]) or np.all(gt == gt[0]):
        raise UndefinedMetricError("rank correlation is undefined when one side is constant")
    return pred, gt


def kendall_tau(pred, gt) -> float:
    """Kendall's tau-b (tie-corrected)."""
    pred, gt = _check_pair(pred, gt)
    return float(stats.kendalltau(pred, gt, variant="b").statistic)


def spearman_rho(pred, gt) -> float:
    """Pearson correlation of average ranks."""
    pred, gt = _check_pair(pred, gt)
    return float(stats.spearmanr(pred, gt).statistic)


def knapsack_select(values, weights, capacity: int) -> list[int]:
    """Exact 0/1 knapsack by dynamic programming.

    Among optimal sets the lexicographically smallest sorted index tuple is
    returned (a proper prefix sorts first).
    """
    values = [float(v) for v in values]
    weights = [int(w) for w in weights]
    if len(values) != len(weights):
        raise DimensionError("values and weights differ in length")
    if any(w <= 0 for w in weights):
        raise ValueError("weights must be positive integers")
    capacity = max(0, int(capacity))
    m = len(values)
    # best[i][c]: optimum over items i..m-1 with capacity c
    best = np.zeros((m + 1, capacity + 1))
    for i in range(m - 1, -1, -1):
        w, v = weights[i], values[i]
        best[i] = best[i + 1]
        if w <= capacity:
            take = best[i + 1][: capacity + 1 - w] + v
            best[i][w:] = np.maximum(best[i + 1][w:], take)
    chosen = []
    c = capacity
    for i in range(m):
        w, v = weights[i], values[i]
        target = best[i][c]
        can_take = w <= c and best[i + 1][c - w] + v == target
        can_skip = best[i + 1][c] == target
        # a zero optimum is reached by the empty remainder, which sorts before any set holding i
        if can_skip and (not can_take or target == 0.0):
            continue
        if can_take:
            chosen.append(i)
            c -= w
    return chosen


@dataclass
class SummarySelection:
    segments: list[int]
    frames: list[int]
    total_frames: int
    budget: int


def generate_summary(frame_scores, segments, budget_ratio: float = DEFAULT_BUDGET) -> SummarySelection:
    """Pick whole segments maximizing mean segment score within a frame budget."""
    scores = np.asarray(frame_scores, dtype=np.float64)
    n = scores.shape[0]
    validate_segments(segments, n)
    if not 0.0 < budget_ratio <= 1.0:
        raise ValueError(f"budget_ratio must be in (0, 1], got {budget_ratio}")
    capacity = int(math.floor(budget_ratio * n + 1e-9))
    values = [float(scores[s:e].mean()) for s, e in segments]
    lengths = [e - s for s, e in segments]
    picked = knapsack_select(values, lengths, capacity)
    frames = [f for k in picked for f in range(segments[k][0], segments[k][1])]
    return SummarySelection(picked, frames, len(frames), capacity)


def f_score(generated, user) -> tuple[float, float, float]:
    """Precision, recall and F-measure of frame-set overlap."""
    g, h = set(int(i) for i in generated), set(int(i) for i in user)
    if not g and not h:
        raise UndefinedMetricError("both summaries are empty")
    overlap = len(g & h)
    recall = overlap / len(h) if h else 0.0
    precision = overlap / len(g) if g else 0.0
    f = 2 * recall * precision / (recall + precision) if recall + precision > 0 else 0.0
    return precision, recall, f


@dataclass
class VideoMetrics:
    id: str
    tau: float
    rho: float
    precision: float
    recall: float
    f_score: float
    flags: list[str] = field(default_factory=list)


def _mean_defined(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


def evaluate_video(pred_scores, sample: VideoSample, budget_ratio: float = DEFAULT_BUDGET) -> VideoMetrics:
    """Score one video against every annotator and average over annotators.

    Undefined correlations (constant prediction or annotator) are excluded
    from the average and reported in ``flags``.
    """
    if sample.user_annotations is None:
        raise DatasetError("missing user annotations", sample.id, "user_annotations")
    if sample.segments is None:
        raise DatasetError("missing segments", sample.id, "segments")
    pred = np.asarray(pred_scores, dtype=np.float64)
    if pred.shape != (sample.n_frames,):
        raise DimensionError(f"prediction length {pred.shape} != n_frames {sample.n_frames}")
    flags: list[str] = []
    taus, rhos, ps, rs, fs = [], [], [], [], []
    generated = generate_summary(pred, sample.segments, budget_ratio).frames
    for u, annot in enumerate(sample.user_annotations):
        try:
            taus.append(kendall_tau(pred, annot))
            rhos.append(spearman_rho(pred, annot))
        except UndefinedMetricError:
            taus.append(math.nan)
            rhos.append(math.nan)
            flags.append(f"rank_undefined:annotator{u}")
        user = generate_summary(annot, sample.segments, budget_ratio).frames
        try:
            p, r, f = f_score(generated, user)
        except UndefinedMetricError:
            p = r = f = math.nan
            flags.append(f"fscore_undefined:annotator{u}")
        ps.append(p)
        rs.append(r)
        fs.append(f)
    return VideoMetrics(sample.id, _mean_defined(taus), _mean_defined(rhos), _mean_defined(ps),
                        _mean_defined(rs), _mean_defined(fs), flags)


METRIC_FIELDS = ("tau", "rho", "precision", "recall", "f_score")


@dataclass
class MetricsReport:
    videos: list[VideoMetrics]
    metadata: dict = field(default_factory=dict)

    @property
    def means(self) -> dict[str, float]:
        return {k: _mean_defined([getattr(v, k) for v in self.videos]) for k in METRIC_FIELDS}

    def to_dict(self) -> dict:
        return {
            "videos": [_clean(asdict(v)) for v in self.videos],
            "means": _clean(self.means),
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("id",) + METRIC_FIELDS)
        for v in self.videos:
            writer.writerow([v.id] + [repr(float(getattr(v, k))) for k in METRIC_FIELDS])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        videos = [VideoMetrics(**{k: (math.nan if v is None and k in METRIC_FIELDS else v) for k, v in e.items()})
                  for e in d["videos"]]
        return cls(videos, d.get("metadata", {}))


def _clean(d: dict) -> dict:
    """NaN is not valid JSON; encode undefined metrics as null."""
    return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}


def evaluate_dataset(predictions: dict[str, np.ndarray], samples, budget_ratio: float = DEFAULT_BUDGET,
                     metadata: dict | None = None) -> MetricsReport:
    meta = {"budget_ratio": budget_ratio, "averaging": "annotators within video, then videos"}
    meta.update(metadata or {})
    rows = [evaluate_video(predictions[s.id], s, budget_ratio) for s in samples]
    return MetricsReport(rows, meta)


def aggregate_reports(reports: list[MetricsReport]) -> dict:
    """Mean of split-level means, plus the per-split means themselves."""
    per_split = [r.means for r in reports]
    agg = {k: _mean_defined([m[k] for m in per_split]) for k in METRIC_FIELDS}
    return {"n_splits": len(reports), "means": _clean(agg), "per_split": [_clean(m) for m in per_split]}
