"""Per-pixel evaluation kernels.

The Cython build is used when importable; otherwise (or when
``WATERLOG_PURE_PYTHON=1``) the numpy/scipy fallback is selected. Callers
see the same three functions either way:

``confusion_counts(pred, gt)``
    ``(tp, fp, tn, fn)`` for flat uint8 arrays.
``threshold_histogram(probs, gt, thresholds)``
    Two int64 histograms of length ``len(thresholds) + 1``; bin ``k`` holds
    pixels for which exactly ``k`` thresholds are ``<= p``.
``label_components(mask)``
    4-connected labels (int32, 0 = background) and the component count.
"""

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels
if not os.environ.get("WATERLOG_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def _flat_u8(a):
    return np.ascontiguousarray(np.asarray(a).reshape(-1), dtype=np.uint8)


def confusion_counts(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return tuple(int(v) for v in _impl.confusion_counts(_flat_u8(pred != 0), _flat_u8(gt != 0)))


def threshold_histogram(probs, gt, thresholds):
    probs, gt = np.asarray(probs), np.asarray(gt)
    if probs.shape != gt.shape:
        raise ValueError(f"shape mismatch: {probs.shape} vs {gt.shape}")
    p = np.ascontiguousarray(probs.reshape(-1), dtype=np.float64)
    t = np.ascontiguousarray(thresholds, dtype=np.float64)
    return _impl.threshold_histogram(p, _flat_u8(gt != 0), t)


def label_components(mask):
    m = np.ascontiguousarray(np.asarray(mask) != 0, dtype=np.uint8)
    if m.ndim != 2:
        raise ValueError("mask must be 2-D")
    return _impl.label_components(m)


__all__ = ["BACKEND", "confusion_counts", "threshold_histogram", "label_components"]
