"""Pretraining, the two-step semi-supervised loop, curriculum scheduling,
and the ablation switches."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .augment import AugmentConfig, align_scores, render_views, sample_view_plan
from .data import Dataset
from .losses import LossReport, loss_consistency, loss_prototype, loss_supervised, loss_uniformity, total_loss
from .model import (
    ModelState,
    PrototypeBank,
    UnavailableClassError,
    compute_prototypes,
    downsample_labels,
    encode,
    head_scores,
    init_model,
    project,
    prototype_scores,
    save_checkpoint,
    segment_probs,
)
from .uncertainty import (
    MaskPair,
    build_mask_pair,
    calculate_gamma,
    calculate_gamma_per_class,
    certainty_mask_per_class,
    consistency_mask,
    soft_certainty_mask,
)

ABLATIONS = (
    "none",
    "no_ssl",
    "no_target",
    "gamma_neg_inf",
    "sym_param",
    "sym_nonparam",
    "no_reg_losses",
    "mcd_ssl",
    "soft_mask",
    "per_class_gamma",
)


@dataclass
class TrainConfig:
    seed: int = 0
    steps_pretrain: int = 200
    steps_ssl: int = 100
    batch_source: int = 4
    batch_target: int = 4
    prototype_batch: int = 8
    learning_rate: float = 0.05
    momentum: float = 0.9
    weights: tuple = (0.3, 0.001, 0.05, 1.0)  # lambda_c, lambda_u, lambda_p, lambda_s
    ablation: str = "none"
    curriculum: list = field(default_factory=lambda: ["B", "C"])
    dropout_p: float = 0.2
    k: int = 4
    f: int = 32
    head_tau: float = 1.0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    log_interval: int = 5

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; one of {ABLATIONS}")


class SGD:
    """Plain SGD with momentum; velocity per named parameter."""

    def __init__(self, params, lr, momentum):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self):
        for name, t in self.params.items():
            if t.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += t.grad
            t.data -= self.lr * v

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()


def _batch_indices(rng_key, count, size):
    rng = np.random.default_rng(rng_key)
    return rng.choice(count, size=min(size, count), replace=count < size)


def _stack_images(dataset: Dataset, idx):
    return np.stack([dataset.images[i] for i in idx])


def _stack_labels(dataset: Dataset, idx):
    return np.stack([dataset.labels[i] for i in idx])


def pretrain_step(m: ModelState, source_x, source_y, cfg: TrainConfig, opt: SGD):
    """One gradient step on the supervised + uniformity objectives."""
    x = ad.Tensor(source_x)
    feat = encode(x, m)
    z = project(feat, m)
    logits = head_scores(feat, m)
    probs, _ = segment_probs(logits, source_x.shape[-2:], cfg.head_tau)
    l_s, void_warning = loss_supervised(probs, source_y)
    lam_u = 0.0 if cfg.ablation == "no_reg_losses" else cfg.weights[1]
    l_u = loss_uniformity(z) if lam_u else ad.Tensor(0.0)
    total, report = total_loss(
        0.0, l_u, 0.0, l_s,
        weights=(0.0, lam_u, 0.0, cfg.weights[3]),
        void_warning=void_warning,
    )
    opt.zero_grad()
    ad.backward(total)
    opt.step()
    m.step += 1
    return report


def _take(batch_tensor, i):
    """Slice image i from a batch tensor, keeping a leading axis of 1."""
    n = batch_tensor.shape[0]
    flat = ad.reshape(batch_tensor, (n, -1))
    sel = np.zeros((1, n))
    sel[0, i] = 1.0
    row = ad.matmul(ad.Tensor(sel), flat)
    return ad.reshape(row, (1,) + tuple(batch_tensor.shape[1:]))


def _align_batch(raw1, raw2, plans):
    """Per-image score alignment, re-batched."""
    out1, out2 = [], []
    for i, plan in enumerate(plans):
        a1, a2 = align_scores(_take(raw1, i), _take(raw2, i), plan)
        out1.append(a1)
        out2.append(a2)
    return ad.concat(out1, axis=0), ad.concat(out2, axis=0)


def _branch_scores(view, m, cfg, bank, kind, dropout_key=None, protect=True):
    """Raw upsampled class scores for one branch.

    kind "param": encoder + segmentation head; kind "nonparam": encoder +
    projection + prototypes. With ``protect`` the head weights / prototype
    vectors are frozen along the consistency path, which is what blocks the
    constant-prediction shortcut; the symmetric ablations drop it.
    Returns (raw_scores, embeddings-or-None).
    """
    seed, counter = dropout_key if dropout_key else (None, 0)
    feat = encode(ad.Tensor(view), m, dropout_seed=seed, dropout_counter=counter)
    if kind == "param":
        low = head_scores(feat, m, detach=protect)
        raw = ad.bilinear_resize(low, view.shape[-2:])
        return raw, None
    z = project(feat, m)
    low = prototype_scores(z, bank, detach=protect)
    raw = ad.bilinear_resize(low, view.shape[-2:])
    return raw, z


def ssl_step(m: ModelState, source_x, source_y, proto_x, proto_y, target_x,
             cfg: TrainConfig, opt: SGD, bank: PrototypeBank):
    """One two-phase step: solve the certainty threshold, then descend the total loss."""
    k = m.k
    h, w = target_x.shape[-2:]

    # prototypes from the labelled prototype batch (history-backed)
    z_proto = project(encode(ad.Tensor(proto_x), m), m)
    proto_labels = downsample_labels(proto_y, m.downsample)
    bank = compute_prototypes(z_proto, proto_labels, k, bank)
    if not all(bank.available(k)):
        missing = [c for c, ok in enumerate(bank.available(k)) if not ok]
        raise UnavailableClassError(missing[0])

    # two views of each target image
    if cfg.ablation == "mcd_ssl":
        plans = None
        v1 = v2 = target_x
    else:
        plans = [
            sample_view_plan(
                np.random.SeedSequence([cfg.seed, m.step, i]).generate_state(1)[0],
                (h, w),
                cfg.augment,
            )
            for i in range(target_x.shape[0])
        ]
        rendered = [render_views(target_x[i], plans[i], cfg.augment) for i in range(target_x.shape[0])]
        v1 = np.stack([r[0] for r in rendered])
        v2 = np.stack([r[1] for r in rendered])

    kind1 = "nonparam" if cfg.ablation == "sym_nonparam" else "param"
    kind2 = "param" if cfg.ablation == "sym_param" else "nonparam"
    protect = cfg.ablation not in ("sym_param", "sym_nonparam")
    key1 = (cfg.seed, 2 * m.step) if cfg.ablation == "mcd_ssl" else None
    key2 = (cfg.seed, 2 * m.step + 1) if cfg.ablation == "mcd_ssl" else None
    if cfg.ablation == "mcd_ssl":
        saved_p = m.dropout_p
        m.dropout_p = cfg.dropout_p
    raw1, z1 = _branch_scores(v1, m, cfg, bank, kind1, key1, protect)
    raw2, z2 = _branch_scores(v2, m, cfg, bank, kind2, key2, protect)
    if cfg.ablation == "mcd_ssl":
        m.dropout_p = saved_p

    if plans is not None:
        raw1, raw2 = _align_batch(raw1, raw2, plans)

    # step 1: threshold from the consistency of the two views
    m_c = consistency_mask(raw1.data, raw2.data)
    gamma_scores = raw2.data if kind2 == "nonparam" else raw1.data
    if cfg.ablation == "per_class_gamma":
        gammas = calculate_gamma_per_class(m_c, gamma_scores, m.gamma_per_class)
        m.gamma_per_class = gammas
        gamma = float(gammas.mean())
        m_gamma = certainty_mask_per_class(gamma_scores, gammas)
        masks = MaskPair(m_c, m_gamma, gamma, float(np.mean(m_c)), float(np.mean(m_gamma)))
    elif cfg.ablation == "gamma_neg_inf":
        gamma = -2.0  # below the cosine floor: every pixel certain
        masks = build_mask_pair(m_c, gamma_scores, gamma)
    elif cfg.ablation == "soft_mask":
        gamma = calculate_gamma(m_c, gamma_scores)
        soft = soft_certainty_mask(gamma_scores, m.tau)
        masks = MaskPair(m_c, soft, gamma, float(np.mean(m_c)), float(np.mean(soft)))
    else:
        gamma = calculate_gamma(m_c, gamma_scores)
        masks = build_mask_pair(m_c, gamma_scores, gamma)
    m.gamma = float(gamma)

    # step 2: gradient step on the weighted total
    tau1 = cfg.head_tau if kind1 == "param" else m.tau
    tau2 = cfg.head_tau if kind2 == "param" else m.tau
    p1 = ad.softmax_t(raw1, tau1, axis=1)
    p2 = ad.softmax_t(raw2, tau2, axis=1)
    l_c = loss_consistency(p1, p2, masks.certainty)

    if cfg.ablation == "no_reg_losses":
        l_u = ad.Tensor(0.0)
        l_p = ad.Tensor(0.0)
    else:
        z_reg = z2 if z2 is not None else (z1 if z1 is not None else z_proto)
        l_u = loss_uniformity(z_reg)
        l_p = loss_prototype(bank)

    xs = ad.Tensor(source_x)
    feat_s = encode(xs, m)
    logits_s = head_scores(feat_s, m)
    probs_s, _ = segment_probs(logits_s, source_x.shape[-2:], cfg.head_tau)
    l_s, void_warning = loss_supervised(probs_s, source_y)

    n_certain = int(np.count_nonzero(np.asarray(masks.certainty) > 0.5))
    total, report = total_loss(
        l_c, l_u, l_p, l_s, weights=cfg.weights,
        n_certain=n_certain, void_warning=void_warning,
    )
    opt.zero_grad()
    ad.backward(total)
    opt.step()
    m.step += 1

    return bank, masks, report


def dominant_fraction(m: ModelState, bank: PrototypeBank, target: Dataset):
    """Collapse monitor: largest fraction of the target split's pixels
    claimed by a single prototype on a clean (un-augmented) forward."""
    _, predicted = predict(m, bank, target.images)
    counts = np.bincount(predicted.reshape(-1), minlength=m.k)
    return float(counts.max() / predicted.size)


def train(cfg: TrainConfig, datasets, out_dir, source_name="A"):
    """Pretrain on the labelled source, then run the SSL curriculum stages.

    datasets: name -> Dataset; the source dataset must carry labels. Writes
    a per-step CSV log and one checkpoint per stage under ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    source = datasets[source_name]
    if source.labels is None:
        raise ValueError(f"source dataset {source_name!r} has no labels")
    stages = [] if cfg.ablation == "no_ssl" else list(cfg.curriculum)
    for stage in stages:
        if stage not in datasets:
            raise ValueError(f"curriculum stage {stage!r} missing from datasets")

    m = init_model(seed=cfg.seed, k=cfg.k, f=cfg.f)
    opt = SGD(m.params, cfg.learning_rate, cfg.momentum)
    bank = PrototypeBank()
    log_rows = []

    def log(phase, stage, report, masks=None, extras=None):
        log_rows.append(
            {
                "step": m.step,
                "phase": phase,
                "stage": stage,
                "l_c": report.l_c,
                "l_u": report.l_u,
                "l_p": report.l_p,
                "l_s": report.l_s,
                "total": report.total,
                "n_certain": report.n_certain,
                "gamma": "" if masks is None else masks.gamma_used,
                "p_consistent": "" if masks is None else masks.p_consistent,
                "dominant_fraction": "" if extras is None else extras["dominant_fraction"],
            }
        )

    for step in range(cfg.steps_pretrain):
        idx = _batch_indices([cfg.seed, 1, step], len(source), cfg.batch_source)
        report = pretrain_step(m, _stack_images(source, idx), _stack_labels(source, idx), cfg, opt)
        log("pretrain", source_name, report)

    stage_hashes = {}
    from .model import checkpoint_hash  # local import to avoid a cycle at module load

    for stage_idx, stage in enumerate(stages):
        target_ds = source if cfg.ablation == "no_target" else datasets[stage]
        for step in range(cfg.steps_ssl):
            sidx = _batch_indices([cfg.seed, 2, stage_idx, step], len(source), cfg.batch_source)
            pidx = _batch_indices([cfg.seed, 3, stage_idx, step], len(source), cfg.prototype_batch)
            tidx = _batch_indices([cfg.seed, 4, stage_idx, step], len(target_ds), cfg.batch_target)
            bank, masks, report = ssl_step(
                m,
                _stack_images(source, sidx), _stack_labels(source, sidx),
                _stack_images(source, pidx), _stack_labels(source, pidx),
                _stack_images(target_ds, tidx),
                cfg, opt, bank,
            )
            extras = None
            if step % cfg.log_interval == 0 or step == cfg.steps_ssl - 1:
                extras = {"dominant_fraction": dominant_fraction(m, bank, target_ds)}
            log("ssl", stage, report, masks, extras)
        ckpt_dir = out_dir / f"checkpoint_stage_{stage_idx}_{stage}"
        save_checkpoint(m, bank, ckpt_dir, extra_meta={"stage": stage})
        stage_hashes[stage] = checkpoint_hash(ckpt_dir)

    final_dir = out_dir / "checkpoint_final"
    save_checkpoint(
        m, bank, final_dir,
        extra_meta={"stages": stages, "stage_hashes": stage_hashes, "ablation": cfg.ablation},
    )

    log_path = out_dir / "training_log.csv"
    fieldnames = [
        "step", "phase", "stage", "l_c", "l_u", "l_p", "l_s", "total",
        "n_certain", "gamma", "p_consistent", "dominant_fraction",
    ]
    with open(log_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in log_rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})
    return m, bank, log_rows


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


# ---------------------------------------------------------------------------
# inference / evaluation


def eval_prototypes(m: ModelState, source: Dataset, bank: PrototypeBank = None):
    """Prototypes from every labelled source image (test-time convention)."""
    bank = bank or PrototypeBank()
    z = project(encode(ad.Tensor(np.stack(source.images)), m), m)
    labels_down = downsample_labels(np.stack(source.labels), m.downsample)
    return compute_prototypes(z, labels_down, m.k, bank)


def predict(m: ModelState, bank: PrototypeBank, images):
    """Per-pixel max cosine score and predicted class for a stack of images."""
    x = ad.Tensor(np.stack(images))
    z = project(encode(x, m), m)
    low = prototype_scores(z, bank, detach=True)
    raw = ad.bilinear_resize(low, x.shape[-2:])
    scores = raw.data
    return scores.max(axis=1), scores.argmax(axis=1)


def evaluate_records(m: ModelState, bank: PrototypeBank, test: Dataset):
    """Flat evaluation records over a labelled test dataset."""
    from .metrics import records_from_eval

    if test.labels is None:
        raise ValueError("evaluation needs a labelled test dataset")
    max_cos, predicted = predict(m, bank, test.images)
    labels = np.stack(test.labels)
    ids = np.broadcast_to(
        np.arange(labels.shape[0])[:, None, None], labels.shape
    )
    return records_from_eval(max_cos, predicted, labels, m.k, image_ids=ids)
