"""Pure-Python (numpy/scipy) fallback for the compiled kernels."""

import numpy as np
from scipy import ndimage


def confusion_counts(pred, gt):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError("pred and gt lengths differ")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return tp, fp, pred.size - tp - fp - fn, fn


def threshold_histogram(probs, gt, thresholds):
    probs = np.asarray(probs, dtype=np.float64)
    gt = np.asarray(gt, dtype=bool)
    if probs.shape != gt.shape:
        raise ValueError("probs and gt lengths differ")
    k = np.searchsorted(thresholds, probs, side="right")
    m = len(thresholds) + 1
    pos = np.bincount(k[gt], minlength=m).astype(np.int64)
    neg = np.bincount(k[~gt], minlength=m).astype(np.int64)
    return pos, neg


_FOUR = ndimage.generate_binary_structure(2, 1)


def label_components(mask):
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=_FOUR)
    return labels.astype(np.int32), int(n)
