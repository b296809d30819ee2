"""Toy segmentation network: conv encoder, per-pixel projection MLP, 1x1 head,
and the prototype machinery with per-class history."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import read_tensor, write_tensor


class UnavailableClassError(ValueError):
    def __init__(self, class_id):
        super().__init__(f"class {class_id} has no prototype and no history yet")
        self.class_id = class_id


@dataclass
class ModelState:
    params: dict  # name -> ad.Tensor (requires_grad)
    k: int = 4
    f: int = 64
    downsample: int = 4
    tau: float = 0.07
    gamma: float | None = None
    gamma_per_class: np.ndarray | None = None
    dropout_p: float = 0.0
    step: int = 0

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


@dataclass
class PrototypeBank:
    vectors: ad.Tensor | None = None  # (F, K) unit columns, in-graph
    fresh: list = field(default_factory=list)
    history: dict = field(default_factory=dict)  # class id -> last non-stale (F,) array

    def available(self, k):
        return [c in self.history for c in range(k)]


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_model(seed=0, k=4, f=64, dropout_p=0.0) -> ModelState:
    rng = np.random.default_rng([seed, 0xC0DE])
    p = {}

    def param(name, arr):
        p[name] = ad.Tensor(arr, requires_grad=True)

    param("enc.w1", _he(rng, (32, 3, 3, 3), 3 * 9))
    param("enc.b1", np.zeros(32))
    param("enc.w2", _he(rng, (64, 32, 3, 3), 32 * 9))
    param("enc.b2", np.zeros(64))
    param("enc.w3", _he(rng, (f, 64, 3, 3), 64 * 9))
    param("enc.b3", np.zeros(f))
    for i in (1, 2, 3):
        param(f"proj.w{i}", _he(rng, (f, f, 1, 1), f))
        param(f"proj.b{i}", np.zeros(f))
    param("head.w", _he(rng, (k, f, 1, 1), f))
    param("head.b", np.zeros(k))
    return ModelState(params=p, k=k, f=f, dropout_p=dropout_p)


def encode(x, m: ModelState, dropout_seed=None, dropout_counter=0):
    """Image batch (N, 3, H, W) -> features (N, F, h, w); h = H/4, w = W/4."""
    x = ad.as_tensor(x)
    h, w = x.shape[-2:]
    if h % m.downsample or w % m.downsample:
        raise ValueError(f"extent {(h, w)} not divisible by downsample {m.downsample}")
    p = m.params
    out = ad.relu(ad.conv2d(x, p["enc.w1"], p["enc.b1"], stride=2, padding=1))
    out = ad.relu(ad.conv2d(out, p["enc.w2"], p["enc.b2"], stride=2, padding=1))
    out = ad.conv2d(out, p["enc.w3"], p["enc.b3"], stride=1, padding=1)
    if dropout_seed is not None and m.dropout_p > 0.0:
        out = ad.dropout(out, m.dropout_p, dropout_seed, dropout_counter)
    return out


def project(feat, m: ModelState):
    """Per-pixel two-hidden-layer MLP (1x1 convs) with unit-norm output embeddings."""
    p = m.params
    out = ad.relu(ad.conv2d(feat, p["proj.w1"], p["proj.b1"]))
    out = ad.relu(ad.conv2d(out, p["proj.w2"], p["proj.b2"]))
    out = ad.conv2d(out, p["proj.w3"], p["proj.b3"])
    return ad.l2_normalize(out, axis=1)


def head_scores(feat, m: ModelState, detach=False):
    """1x1-conv segmentation head: features -> K logits per pixel."""
    w, b = m.params["head.w"], m.params["head.b"]
    if detach:
        w, b = w.detach(), b.detach()
    return ad.conv2d(feat, w, b)


def downsample_labels(labels, ratio):
    """Nearest-neighbour label downsampling, sampling at cell centres."""
    labels = np.asarray(labels)
    rows = np.arange(labels.shape[-2] // ratio) * ratio + ratio // 2
    cols = np.arange(labels.shape[-1] // ratio) * ratio + ratio // 2
    return labels[..., rows[:, None], cols[None, :]]


def compute_prototypes(z, labels_down, k, bank: PrototypeBank = None) -> PrototypeBank:
    """Per-class normalised sums of embeddings; absent classes fall back to history.

    z: (N, F, h, w) embeddings (in-graph); labels_down: (N, h, w) int maps with
    -1 for void. Void pixels contribute to no prototype.
    """
    z = ad.as_tensor(z)
    n, f = z.shape[0], z.shape[1]
    bank = bank or PrototypeBank()
    flat = ad.reshape(ad.transpose(z, (1, 0, 2, 3)), (f, -1))  # (F, N*h*w)
    lab = np.asarray(labels_down).reshape(-1)

    columns, fresh = [], []
    history = dict(bank.history)
    for c in range(k):
        sel = (lab == c).astype(np.float64)[:, None]  # (N*h*w, 1)
        if sel.sum() > 0:
            col = ad.l2_normalize(ad.matmul(flat, ad.Tensor(sel)), axis=0)
            history[c] = col.data[:, 0].copy()
            fresh.append(True)
        elif c in history:
            col = ad.Tensor(history[c][:, None])
            fresh.append(False)
        else:
            col = ad.Tensor(np.zeros((f, 1)))
            fresh.append(False)
        columns.append(col)
    vectors = ad.concat(columns, axis=1)
    return PrototypeBank(vectors=vectors, fresh=fresh, history=history)


def prototype_scores(z, bank: PrototypeBank, detach=False):
    """Cosine scores (N, K, h, w) of unit embeddings against the prototype bank."""
    k = bank.vectors.shape[1]
    for c, ok in enumerate(bank.available(k)):
        if not ok:
            raise UnavailableClassError(c)
    vec = bank.vectors.detach() if detach else bank.vectors
    n, f, h, w = z.shape
    rows = ad.reshape(ad.transpose(z, (0, 2, 3, 1)), (n * h * w, f))
    s = ad.matmul(rows, vec)
    return ad.transpose(ad.reshape(s, (n, h, w, k)), (0, 3, 1, 2))


def segment_probs(scores_low, target_extent, tau):
    """Bilinear upsample to target extent, then temperature softmax over classes."""
    up = ad.bilinear_resize(scores_low, target_extent)
    return ad.softmax_t(up, tau, axis=1), up


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(m: ModelState, bank: PrototypeBank | None, directory, extra_meta=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, t in m.params.items():
        write_tensor(directory / (name + ".gt"), t.data.astype(np.float32))
    if bank is not None and bank.vectors is not None:
        write_tensor(directory / "prototypes.gt", bank.vectors.data.astype(np.float32))
        for c, h in sorted(bank.history.items()):
            write_tensor(directory / f"history.{c}.gt", h.astype(np.float32))
    if m.gamma is not None:
        write_tensor(directory / "gamma.gt", np.asarray(m.gamma, dtype=np.float64))
    if m.gamma_per_class is not None:
        write_tensor(directory / "gamma_per_class.gt", m.gamma_per_class.astype(np.float64))
    meta = {
        "K": m.k,
        "F": m.f,
        "tau": m.tau,
        "downsample": m.downsample,
        "step": m.step,
        "dropout_p": m.dropout_p,
        "gamma": m.gamma,
        "history_classes": sorted(bank.history) if bank else [],
    }
    if extra_meta:
        meta.update(extra_meta)
    with open(directory / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(directory):
    directory = Path(directory)
    with open(directory / "meta.json") as fh:
        meta = json.load(fh)
    m = init_model(k=meta["K"], f=meta["F"], dropout_p=meta.get("dropout_p", 0.0))
    for name in list(m.params):
        m.params[name] = ad.Tensor(
            read_tensor(directory / (name + ".gt")).astype(np.float64), requires_grad=True
        )
    m.tau = meta["tau"]
    m.step = meta["step"]
    m.gamma = meta.get("gamma")
    gpc = directory / "gamma_per_class.gt"
    if gpc.exists():
        m.gamma_per_class = read_tensor(gpc)
    bank = PrototypeBank()
    for c in meta.get("history_classes", []):
        bank.history[c] = read_tensor(directory / f"history.{c}.gt").astype(np.float64)
    proto = directory / "prototypes.gt"
    if proto.exists():
        bank.vectors = ad.Tensor(read_tensor(proto).astype(np.float64))
        bank.fresh = [False] * bank.vectors.shape[1]
    return m, bank, meta


def checkpoint_hash(directory):
    """Stable digest over every artifact in a checkpoint directory."""
    digest = hashlib.sha256()
    for path in sorted(Path(directory).iterdir()):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()
