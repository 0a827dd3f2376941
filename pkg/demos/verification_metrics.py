"""
Verification metrics on synthetic scores
========================================

Builds genuine and impostor cosine scores from two Gaussians and reads off
the operating points used for masked face verification.
"""

import numpy as np

from maskdistill.core import make_rng
from maskdistill.metrics import (ScoreSet, det_curve, fdr, fnmr_at_fmr, kfold_accuracy,
                                 max_accuracy, report)

# 3000 genuine and 3000 impostor scores, interleaved as they would be in a pair list
rng = make_rng(0, "demo-scores")
genuine = rng.normal(0.55, 0.15, 3000)
impostor = rng.normal(0.05, 0.10, 3000)
flags = np.tile([True, False], 3000)
pair_scores = np.empty(6000)
pair_scores[flags], pair_scores[~flags] = genuine, impostor
scores = ScoreSet.from_pairs(pair_scores, flags)
print("counts (genuine, impostor):", scores.counts)

# a match means score >= threshold; FNMR at a FMR ceiling picks the lowest admissible threshold
for ceiling in (1e-3, 1e-2):
    rate, thr = fnmr_at_fmr(scores, ceiling)
    print("FNMR at FMR %.0e: %.4f  (threshold %.4f)" % (ceiling, rate, thr))

# Fisher discriminant ratio: distance between the two score distributions
print("FDR %.2f, expected about %.2f" % (fdr(scores), 0.5 ** 2 / (0.15 ** 2 + 0.10 ** 2)))

# best single-threshold accuracy, and the cross-validated version on 10 folds of 600 pairs
acc, thr = max_accuracy(scores)
folds = np.repeat(np.arange(10), 600)
kacc, per_fold = kfold_accuracy(folds, pair_scores, flags)
print("max accuracy %.4f at %.4f, 10-fold %.4f (min fold %.4f)" % (acc, thr, kacc, min(per_fold)))

# rates at a FMR ceiling only depend on how scores are ordered,
# so an increasing transform leaves them unchanged
warped = ScoreSet.from_pairs(np.tanh(3 * pair_scores), flags)
print("FNMR at FMR 1e-3 after tanh: %.4f" % fnmr_at_fmr(warped, 1e-3)[0])

# the DET curve lists thresholds with FMR and FNMR at every distinct threshold
_, fmr, fnmr = det_curve(scores)
eer = np.argmin(np.abs(fmr - fnmr))
print("equal error rate about %.4f" % ((fmr[eer] + fnmr[eer]) / 2))

print()
print(report(scores, name="gaussians").to_text())
