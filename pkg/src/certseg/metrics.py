"""Misclassification-detection evaluation: confusion semantics, curves,
area summaries, and the threshold selection protocols.

Convention: higher score = more uncertain, and a pixel is certain iff its
score is strictly below the threshold. A trained feature-space threshold
converts via score = -max cosine, nudged so its inclusive rule survives
the strict comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Records:
    """Flat per-pixel evaluation records."""

    scores: np.ndarray  # float, higher = more uncertain
    accurate: np.ndarray  # bool
    image_ids: np.ndarray | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.accurate = np.asarray(self.accurate, dtype=bool)
        if self.scores.shape != self.accurate.shape:
            raise ValueError(
                f"records: {self.scores.shape} scores vs {self.accurate.shape} flags"
            )
        if not np.isfinite(self.scores).all():
            raise ValueError("records: non-finite scores")
        if self.image_ids is not None:
            self.image_ids = np.asarray(self.image_ids)

    def __len__(self):
        return self.scores.size

    def subset(self, mask):
        ids = self.image_ids[mask] if self.image_ids is not None else None
        return Records(self.scores[mask], self.accurate[mask], ids)


@dataclass
class SweepSummary:
    thresholds: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    tn: np.ndarray
    fn: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    f_beta: np.ndarray
    a_md: np.ndarray
    p_ac: np.ndarray
    auroc: float = float("nan")
    aupr: float = float("nan")
    max_amd: float = 0.0
    max_amd_pac: float = 0.0
    max_f: float = 0.0
    max_f_pac: float = 0.0
    beta: float = 0.5
    degenerate: bool = False
    extras: dict = field(default_factory=dict)


def confusion_at_threshold(records: Records, t):
    """(TP, FP, TN, FN) with certain iff score < t."""
    if len(records) == 0:
        raise ValueError("confusion_at_threshold: empty records")
    certain = records.scores < t
    acc = records.accurate
    tp = int(np.count_nonzero(acc & certain))
    fn = int(np.count_nonzero(acc & ~certain))
    fp = int(np.count_nonzero(~acc & certain))
    tn = int(np.count_nonzero(~acc & ~certain))
    return tp, fp, tn, fn


def f_beta(tp, fp, fn, beta):
    if beta <= 0:
        raise ValueError(f"f_beta: beta must be positive, got {beta}")
    if tp + fp + fn == 0:
        raise ValueError("f_beta: all counts zero")
    b2 = beta * beta
    return (1.0 + b2) * tp / ((1.0 + b2) * tp + fp + b2 * fn)


def a_md_and_pac(tp, fp, tn, fn):
    total = tp + fp + tn + fn
    if total <= 0:
        raise ValueError("a_md_and_pac: empty confusion")
    return (tp + tn) / total, tp / total


def _threshold_grid(scores):
    """Distinct-score midpoints plus -inf / +inf sentinels."""
    uniq = np.unique(scores)
    mids = (uniq[:-1] + uniq[1:]) / 2.0 if uniq.size > 1 else np.empty(0)
    return np.concatenate(([-np.inf], mids, [np.inf]))


def sweep(records: Records, beta=0.5) -> SweepSummary:
    """Full threshold sweep with curve aggregates and Max@ summaries."""
    if len(records) == 0:
        raise ValueError("sweep: empty records")
    degenerate = np.unique(records.scores).size < 2
    thresholds = _threshold_grid(records.scores)

    order = np.argsort(records.scores, kind="stable")
    sorted_scores = records.scores[order]
    sorted_acc = records.accurate[order].astype(np.int64)
    cum_acc = np.concatenate(([0], np.cumsum(sorted_acc)))
    n = len(records)
    n_pos = int(sorted_acc.sum())
    n_neg = n - n_pos

    counts = np.searchsorted(sorted_scores, thresholds, side="left")
    tp = cum_acc[counts].astype(np.float64)
    fp = counts - tp
    fn = n_pos - tp
    tn = n_neg - fp

    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 1.0)
        recall = np.where(n_pos > 0, tp / max(n_pos, 1), 0.0)
        tpr = recall
        fpr = np.where(n_neg > 0, fp / max(n_neg, 1), 0.0)
        b2 = beta * beta
        denom = (1.0 + b2) * tp + fp + b2 * fn
        fbeta = np.where(denom > 0, (1.0 + b2) * tp / np.where(denom > 0, denom, 1.0), 0.0)
    amd = (tp + tn) / n
    pac = tp / n

    trapezoid = getattr(np, "trapezoid", np.trapz)
    auroc = float(trapezoid(tpr, fpr)) if (n_pos > 0 and n_neg > 0) else float("nan")
    # step-wise PR integration: precision held right-constant between recall points
    aupr = float(np.sum(np.diff(recall) * precision[1:])) if n_pos > 0 else float("nan")

    def best(metric):
        # tie-break toward larger p_ac; grid is ordered by increasing p_ac
        top = metric.max()
        idx = np.nonzero(metric >= top - 0.0)[0][-1]
        return float(metric[idx]), float(pac[idx])

    max_amd, max_amd_pac = best(amd)
    max_f, max_f_pac = best(fbeta)

    return SweepSummary(
        thresholds=thresholds,
        tp=tp, fp=fp, tn=tn, fn=fn,
        precision=precision, recall=recall, tpr=tpr, fpr=fpr,
        f_beta=fbeta, a_md=amd, p_ac=pac,
        auroc=auroc, aupr=aupr,
        max_amd=max_amd, max_amd_pac=max_amd_pac,
        max_f=max_f, max_f_pac=max_f_pac,
        beta=beta, degenerate=degenerate,
    )


def auroc(records: Records):
    """Area under the ROC curve (trapezoidal over the full sweep)."""
    summary = sweep(records)
    if not (records.accurate.any() and (~records.accurate).any()):
        raise ValueError("auroc: both classes must be present")
    return summary.auroc


def aupr(records: Records):
    """Area under the PR curve with step-wise interpolation."""
    if not records.accurate.any():
        raise ValueError("aupr: positive class absent")
    return sweep(records).aupr


def gamma_to_score_threshold(gamma):
    """Feature-space threshold -> uncertainty-score threshold, keeping the
    inclusive rule (max cosine >= gamma counts certain)."""
    return np.nextafter(-float(gamma), np.inf)


def metrics_at_threshold(records: Records, t, beta=0.5):
    tp, fp, tn, fn = confusion_at_threshold(records, t)
    amd, pac = a_md_and_pac(tp, fp, tn, fn)
    fb = f_beta(tp, fp, fn, beta) if (tp + fp + fn) > 0 else 0.0
    return {"threshold": float(t), "tp": tp, "fp": fp, "tn": tn, "fn": fn,
            "a_md": amd, "p_ac": pac, "f_beta": fb, "beta": beta}


def _best_threshold(records: Records, metric, beta):
    s = sweep(records, beta)
    arr = s.a_md if metric == "a_md" else s.f_beta
    idx = int(np.nonzero(arr >= arr.max())[0][-1])
    return float(s.thresholds[idx])


def threshold_protocols(records: Records, trained_gamma, validation_sizes, trials, seed, beta=0.5):
    """Validation-size study plus zero-validation evaluation of the trained threshold.

    Records must carry image ids; each trial withholds whole images as the
    validation split, picks the split-optimal threshold, and scores the rest.
    """
    if records.image_ids is None:
        raise ValueError("threshold_protocols: records need image ids")
    ids = np.unique(records.image_ids)
    rng = np.random.default_rng(seed)
    report = {"validation_study": [], "trials": trials}
    for size in validation_sizes:
        if size >= ids.size:
            raise ValueError(f"validation size {size} >= dataset size {ids.size}")
        achieved_amd, achieved_f = [], []
        for _ in range(trials):
            chosen = rng.choice(ids, size=size, replace=False)
            val_mask = np.isin(records.image_ids, chosen)
            val, test = records.subset(val_mask), records.subset(~val_mask)
            for metric, sink in (("a_md", achieved_amd), ("f_beta", achieved_f)):
                t = _best_threshold(val, metric, beta)
                m = metrics_at_threshold(test, t, beta)
                sink.append(m["a_md"] if metric == "a_md" else m["f_beta"])
        report["validation_study"].append(
            {
                "size": int(size),
                "a_md": _distribution(achieved_amd),
                "f_beta": _distribution(achieved_f),
            }
        )
    if trained_gamma is not None:
        t = gamma_to_score_threshold(trained_gamma)
        report["trained_threshold"] = metrics_at_threshold(records, t, beta)
    full = sweep(records, beta)
    report["sweep_max"] = {"max_amd": full.max_amd, "max_f": full.max_f,
                           "auroc": full.auroc, "aupr": full.aupr}
    return report


def _distribution(values):
    arr = np.asarray(values, dtype=np.float64)
    return {
        "mean": float(arr.mean()),
        "std": float(arr.std()),
        "min": float(arr.min()),
        "max": float(arr.max()),
        "values": [float(v) for v in arr],
    }


def cross_domain_report(records_by_domain, beta=0.5):
    """Apply each domain's F-optimal threshold to every other domain."""
    domains = list(records_by_domain)
    optimal = {d: _best_threshold(records_by_domain[d], "f_beta", beta) for d in domains}
    table = []
    for src in domains:
        for dst in domains:
            own = sweep(records_by_domain[dst], beta).max_f
            crossed = metrics_at_threshold(records_by_domain[dst], optimal[src], beta)["f_beta"]
            table.append(
                {
                    "threshold_from": src,
                    "evaluated_on": dst,
                    "max_f": own,
                    "f_at_threshold": crossed,
                    "delta": crossed - own,
                }
            )
    return {"beta": beta, "optimal_thresholds": optimal, "table": table}


def records_from_eval(max_cosine, predicted, labels, k_known, image_ids=None) -> Records:
    """Build records from per-pixel eval output.

    Uncertainty score is -max cosine; a pixel is accurate iff the predicted
    class matches a known-class label. Void labels (-1) are excluded.
    """
    max_cosine = np.asarray(max_cosine).reshape(-1)
    predicted = np.asarray(predicted).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    keep = labels != -1
    accurate = (predicted == labels) & (labels >= 0) & (labels < k_known)
    ids = None
    if image_ids is not None:
        ids = np.asarray(image_ids).reshape(-1)[keep]
    return Records(-max_cosine[keep], accurate[keep], ids)
