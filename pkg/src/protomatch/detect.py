"""Per-pixel out-of-distribution decision from the matching score map.

The score map is min-max normalized and inverted (inverse normalized cosine
similarity): pixels whose best class similarity is low relative to the rest
of the image get values near 1. Thresholding that map with a strict ``>``
yields the pixel-level OOD mask; everything else keeps its class label.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatchError, ThresholdOutOfRangeError

DEFAULT_INCS_THRESHOLD = 0.55


@dataclass(eq=False)
class OODDecision:
    """Pixel-level verdict: ``ood`` flags, retained ``labels``, threshold used."""

    ood: np.ndarray
    labels: np.ndarray
    threshold: float


def incs_map(scores: np.ndarray, value_range: tuple[float, float] | None = None) -> np.ndarray:
    """Inverse normalized similarity in [0, 1].

    ``value_range`` overrides the normalization population (used for the
    opt-in dataset-wide scope); by default the map is normalized over the
    image itself, so its min is 0 and max is 1. A constant score map carries
    no anomaly evidence and maps to all zeros.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not np.isfinite(scores).all():
        raise ValueError("score map contains NaN or Inf")
    if value_range is None:
        lo, hi = float(scores.min()), float(scores.max())
    else:
        lo, hi = float(value_range[0]), float(value_range[1])
    if hi <= lo:
        return np.zeros_like(scores)
    return np.clip(1.0 - (scores - lo) / (hi - lo), 0.0, 1.0)


def threshold_ood(incs: np.ndarray, labels: np.ndarray, threshold: float) -> OODDecision:
    """Flag pixels with inverse similarity strictly above ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ThresholdOutOfRangeError(f"threshold {threshold} outside [0, 1]")
    incs = np.asarray(incs)
    labels = np.asarray(labels)
    if incs.shape != labels.shape:
        raise ShapeMismatchError(f"incs map {incs.shape} does not match labels {labels.shape}")
    return OODDecision(ood=incs > threshold, labels=labels, threshold=float(threshold))
