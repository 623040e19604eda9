"""
Scoring a segmentation
======================

MIoU and Dice count pixels; the average Hausdorff distance looks only at the
4-connected boundaries. Shift a disc by a few pixels and watch the two kinds
of measure react.
"""
import numpy as np

from clawunet.metrics import boundary, confusion, dice, evaluate_set, mask_hausdorff, miou

yy, xx = np.mgrid[0:64, 0:64]


def disc(cx, cy, r):
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= r ** 2


truth = disc(32, 32, 12)
print(f"truth: {truth.sum()} pixels, {len(boundary(truth))} on the boundary")

for shift in (0, 1, 3, 6):
    pred = disc(32 + shift, 32, 12)
    c = confusion(pred, truth)
    print(f"shift {shift}:  MIoU {miou(c):.3f}  Dice {dice(c):.3f}  Aver_hd {mask_hausdorff(pred, truth):.3f}")

###############################################################################
# A report over a set of images: per-image rows plus means, the format used by
# the ``eval`` command.

report = evaluate_set([disc(32 + s, 32, 12) for s in (0, 2, 4)], [truth] * 3, ids=["a", "b", "c"])
for m in report.images:
    print(m)
print(report.summary())
