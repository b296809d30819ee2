"""Consistency mask, the certainty threshold, and its mask variants.

All functions are pure numpy over score arrays; masks feed the losses as
constants, so nothing here participates in the autodiff graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MaskPair:
    consistency: np.ndarray  # bool (N, H, W)
    certainty: np.ndarray  # bool (N, H, W), or float map for the soft variant
    gamma_used: float
    p_consistent: float
    p_certain: float


def consistency_mask(s1, s2):
    """1 where the two views' argmax classes agree; ties break to the lowest index."""
    s1, s2 = np.asarray(s1), np.asarray(s2)
    if s1.shape != s2.shape or s1.shape[1] != s2.shape[1]:
        raise ValueError(f"score shapes differ: {s1.shape} vs {s2.shape}")
    return np.argmax(s1, axis=1) == np.argmax(s2, axis=1)


def calculate_gamma(m_c, scores):
    """Order-statistic threshold: the certain fraction matches the consistent fraction.

    Flattens per-pixel max scores, sorts ascending, and picks the entry at
    index int((1 - p_consistent) * count), clamped to the last element.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("calculate_gamma: empty score tensor")
    max_scores = np.sort(scores.max(axis=1).reshape(-1))
    p_c = float(np.mean(m_c))
    r = int((1.0 - p_c) * max_scores.size)
    r = min(r, max_scores.size - 1)
    return float(max_scores[r])


def certainty_mask(scores, gamma):
    """1 where the best class score clears gamma (inclusive)."""
    scores = np.asarray(scores, dtype=np.float64)
    return scores.max(axis=1) >= gamma


def soft_certainty_mask(scores, tau):
    """Per-batch min-max normalised max-softmax confidence in [0, 1]."""
    scores = np.asarray(scores, dtype=np.float64)
    z = scores / tau
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    conf = (e / e.sum(axis=1, keepdims=True)).max(axis=1)
    lo, hi = conf.min(), conf.max()
    if hi - lo == 0.0:
        return np.full(conf.shape, 0.5)
    return (conf - lo) / (hi - lo)


def calculate_gamma_per_class(m_c, scores, previous=None):
    """Per-class order-statistic thresholds over pixels claimed by each argmax class.

    Classes claiming no pixels keep their previous threshold (or the scalar
    rule's value if there is none).
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("calculate_gamma_per_class: empty score tensor")
    k = scores.shape[1]
    max_scores = scores.max(axis=1).reshape(-1)
    argmax = scores.argmax(axis=1).reshape(-1)
    m_c_flat = np.asarray(m_c).reshape(-1)
    fallback = calculate_gamma(m_c, scores)
    gammas = np.empty(k)
    for c in range(k):
        sel = argmax == c
        if not sel.any():
            gammas[c] = previous[c] if previous is not None else fallback
            continue
        cls_scores = np.sort(max_scores[sel])
        p_c = float(np.mean(m_c_flat[sel]))
        r = int((1.0 - p_c) * cls_scores.size)
        r = min(r, cls_scores.size - 1)
        gammas[c] = cls_scores[r]
    return gammas


def certainty_mask_per_class(scores, gammas):
    """Per-class thresholds applied to pixels by argmax class."""
    scores = np.asarray(scores, dtype=np.float64)
    argmax = scores.argmax(axis=1)
    thresh = np.asarray(gammas)[argmax]
    return scores.max(axis=1) >= thresh


def build_mask_pair(m_c, scores, gamma):
    m_gamma = certainty_mask(scores, gamma)
    return MaskPair(
        consistency=m_c,
        certainty=m_gamma,
        gamma_used=float(gamma),
        p_consistent=float(np.mean(m_c)),
        p_certain=float(np.mean(m_gamma)),
    )
