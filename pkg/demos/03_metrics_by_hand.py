"""The evaluation pipeline on numbers small enough to check by hand.

Run:  python demos/03_metrics_by_hand.py
"""

import numpy as np

from selfvs.data import VideoSample, equal_segments
from selfvs.evaluation import evaluate_video, f_score, generate_summary, kendall_tau, knapsack_select, spearman_rho

# One swapped pair out of six: five concordant, one discordant.
print("tau  ", kendall_tau([1, 3, 2, 4], [1, 2, 3, 4]), "(expect 4/6)")
print("rho  ", spearman_rho([1, 3, 2], [1, 2, 3]), "(expect 0.5)")

# Ties count against tau-b in the denominator only.
print("tau with ties", kendall_tau([1, 1, 2, 3], [1, 2, 3, 4]))

# Knapsack: items 1 and 2 (values 10+12, weight 5) beat every other fitting set.
print("knapsack", knapsack_select([6, 10, 12], [1, 2, 3], 5))

# A summary picks whole segments; each segment is worth its mean frame score.
scores = np.array([0.9] * 3 + [0.1] * 3 + [0.2] * 3 + [0.8] * 3)
sel = generate_summary(scores, equal_segments(12, 3), budget_ratio=0.5)
print("summary segments", sel.segments, "frames", sel.frames)

# Precision is measured against the generated summary, recall against the user's.
print("P, R, F", f_score(range(15, 25), range(0, 20)))

# Two annotators who disagree completely cancel out in the rank metrics.
pred = np.linspace(0, 1, 20)
sample = VideoSample("v", np.zeros((20, 1)), user_annotations=np.stack([pred, pred[::-1]]), segments=equal_segments(20, 2))
m = evaluate_video(pred, sample)
print(f"opposed annotators: tau {m.tau:+.3f}  rho {m.rho:+.3f}  F {m.f_score:.3f}")
