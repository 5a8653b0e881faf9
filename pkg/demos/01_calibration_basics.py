"""Walk through the calibration layer on a hand-sized example.

A quantile model hands us per-KPI intervals; calibration data tells us
how wrong those intervals tend to be; density-ratio weights tell us how
much each calibration point resembles the test point.  The corrected
interval widens by a weighted quantile of the observed errors.

Run:  python demos/01_calibration_basics.py
"""

import numpy as np

from ccke.conformal import (
    CalibrationScores,
    IntervalSet,
    ccke_prediction_set,
    cke_prediction_set,
    compute_score,
    nccke_prediction_set,
)

rng = np.random.default_rng(0)

# A scalar KPI whose true law is y = x + Uniform(-1, 1).  Pretend the
# model's 10%/90% quantile estimates are slightly too narrow and biased.
def model_interval(x):
    return IntervalSet(lo=[x - 0.55], hi=[x + 0.45])

# Calibration contexts lean negative (they were logged under the target
# app); the test context leans positive (the other app ran there).
cal_x = rng.normal(-0.5, 0.8, size=40)
cal_y = cal_x + rng.uniform(-1, 1, size=40)
scores = [compute_score(model_interval(x), [y]) for x, y in zip(cal_x, cal_y)]
cal = CalibrationScores(scores=scores, contexts=cal_x.tolist())

print("calibration scores: min %.3f  median %.3f  max %.3f"
      % (np.min(scores), np.median(scores), np.max(scores)))

# Weights mimic a logistic selection policy: contexts near the test
# point count more.  (In the simulators this ratio comes straight from
# the controller's selection probabilities.)
test_x = 0.9
weight = lambda x: float(np.exp(x))

alpha = 0.2
naive = cke_prediction_set(model_interval(test_x))
unweighted = nccke_prediction_set(model_interval(test_x), cal, alpha)
weighted = ccke_prediction_set(model_interval(test_x), cal, weight, test_x, alpha)

for name, ps in (("CKE (no calibration)", naive),
                 ("NCCKE (unweighted)", unweighted),
                 ("CCKE (weighted)", weighted)):
    if ps.unbounded:
        print(f"{name:22s} -> unbounded set (correction +inf)")
    else:
        print(f"{name:22s} -> [{ps.lo[0]:+.3f}, {ps.hi[0]:+.3f}]"
              f"  correction {ps.correction.value:+.3f}")

# Empirical check: how often does each set contain the true KPI at the
# test context?
hits = {name: 0 for name in ("CKE", "NCCKE", "CCKE")}
n = 20_000
for _ in range(n):
    y = test_x + rng.uniform(-1, 1)
    hits["CKE"] += naive.contains([y])
    hits["NCCKE"] += unweighted.contains([y])
    hits["CCKE"] += weighted.contains([y])
print("\nempirical coverage at the test context over %d draws:" % n)
for name, h in hits.items():
    print(f"  {name:6s} {h / n:.3f}   (target {1 - alpha})")
