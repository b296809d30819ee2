"""Artifact export: per-pixel record dumps, curve CSVs, JSON summaries,
and the matplotlib figures that accompany them."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .data import read_tensor, write_tensor
from .metrics import Records, SweepSummary, sweep

CURVE_FIELDS = [
    "threshold", "tp", "fp", "tn", "fn", "precision", "recall",
    "tpr", "fpr", "f_beta", "a_md", "p_ac",
]


def save_records(records: Records, directory):
    """Record dump: one tensor file per field."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_tensor(directory / "scores.gt", records.scores)
    write_tensor(directory / "accurate.gt", records.accurate.astype(np.uint8))
    if records.image_ids is not None:
        write_tensor(directory / "image_ids.gt", records.image_ids.astype(np.int32))


def load_records(directory) -> Records:
    directory = Path(directory)
    scores = read_tensor(directory / "scores.gt")
    accurate = read_tensor(directory / "accurate.gt").astype(bool)
    ids_path = directory / "image_ids.gt"
    ids = read_tensor(ids_path) if ids_path.exists() else None
    return Records(scores, accurate, ids)


def write_curve_csv(summary: SweepSummary, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVE_FIELDS)
        for i in range(summary.thresholds.size):
            writer.writerow(
                [
                    repr(float(summary.thresholds[i])),
                    int(summary.tp[i]), int(summary.fp[i]),
                    int(summary.tn[i]), int(summary.fn[i]),
                    repr(float(summary.precision[i])), repr(float(summary.recall[i])),
                    repr(float(summary.tpr[i])), repr(float(summary.fpr[i])),
                    repr(float(summary.f_beta[i])), repr(float(summary.a_md[i])),
                    repr(float(summary.p_ac[i])),
                ]
            )


def summary_json(summary: SweepSummary, trained_row=None):
    out = {
        "auroc": summary.auroc,
        "aupr": summary.aupr,
        "max_f05": summary.max_f,
        "max_f05_p_ac": summary.max_f_pac,
        "max_amd": summary.max_amd,
        "max_amd_p_ac": summary.max_amd_pac,
        "beta": summary.beta,
        "degenerate": summary.degenerate,
    }
    if trained_row is not None:
        out["trained_threshold"] = trained_row
    return out


def write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def plot_curves(summary: SweepSummary, directory, stem="curves"):
    """ROC, PR, and the A_MD / F vs p_ac trade-off figures."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    fig, axes = plt.subplots(1, 3, figsize=(13, 4))
    ax = axes[0]
    ax.plot(summary.fpr, summary.tpr)
    ax.plot([0, 1], [0, 1], ls=":", c="gray")
    ax.set_xlabel("FPR")
    ax.set_ylabel("TPR")
    ax.set_title(f"ROC (AUROC={summary.auroc:.3f})")

    ax = axes[1]
    ax.plot(summary.recall, summary.precision)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_ylim(0, 1.02)
    ax.set_title(f"PR (AUPR={summary.aupr:.3f})")

    ax = axes[2]
    ax.plot(summary.p_ac, summary.a_md, label="A_MD")
    ax.plot(summary.p_ac, summary.f_beta, label=f"F_{summary.beta:g}")
    ax.scatter([summary.max_amd_pac], [summary.max_amd], marker="x", c="k")
    ax.scatter([summary.max_f_pac], [summary.max_f], marker="x", c="k")
    ax.set_xlabel("p(accurate, certain)")
    ax.legend()
    ax.set_title("operating points")

    fig.tight_layout()
    path = directory / f"{stem}.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_validation_study(protocol_report, directory, stem="validation_study"):
    """Box plot of achieved metrics against validation-set size."""
    study = protocol_report.get("validation_study", [])
    if not study:
        return None
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sizes = [e["size"] for e in study]
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for ax, key, title in ((axes[0], "a_md", "A_MD"), (axes[1], "f_beta", "F_beta")):
        ax.boxplot([e[key]["values"] for e in study], tick_labels=[str(s) for s in sizes])
        trained = protocol_report.get("trained_threshold")
        if trained is not None:
            ax.axhline(trained[key if key != "f_beta" else "f_beta"], ls="--", c="tab:red",
                       label="trained threshold")
            ax.legend()
        ax.set_xlabel("validation images")
        ax.set_title(title)
    fig.tight_layout()
    path = directory / f"{stem}.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_training_log(log_rows, directory, stem="training"):
    """Loss components and mask statistics over steps."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    steps = [r["step"] for r in log_rows]
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for key in ("l_c", "l_u", "l_p", "l_s"):
        axes[0].plot(steps, [r[key] for r in log_rows], label=key)
    axes[0].set_xlabel("step")
    axes[0].set_yscale("symlog")
    axes[0].legend()
    axes[0].set_title("loss components")

    ssl = [r for r in log_rows if r["gamma"] != ""]
    if ssl:
        s2 = [r["step"] for r in ssl]
        axes[1].plot(s2, [r["p_consistent"] for r in ssl], label="p_consistent")
        axes[1].plot(s2, [r["gamma"] for r in ssl], label="gamma")
        dom = [r for r in ssl if r["dominant_fraction"] != ""]
        if dom:
            axes[1].plot([r["step"] for r in dom],
                         [r["dominant_fraction"] for r in dom],
                         label="dominant fraction")
        axes[1].legend()
    axes[1].set_xlabel("step")
    axes[1].set_title("mask statistics")
    fig.tight_layout()
    path = directory / f"{stem}.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def export_curves(records: Records, directory, beta=0.5, trained_gamma=None, figures=True):
    """Sweep + CSV + JSON summary (+ figures) for one record set."""
    from .metrics import gamma_to_score_threshold, metrics_at_threshold

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    summary = sweep(records, beta)
    write_curve_csv(summary, directory / "curves.csv")
    trained_row = None
    if trained_gamma is not None:
        trained_row = metrics_at_threshold(
            records, gamma_to_score_threshold(trained_gamma), beta
        )
    write_json(summary_json(summary, trained_row), directory / "summary.json")
    if figures:
        plot_curves(summary, directory)
    return summary
