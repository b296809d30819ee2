"""The four training objectives and their weighted total."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

LOG_FLOOR = 1e-12
UNIFORMITY_T = 2.0


@dataclass
class LossReport:
    l_c: float = 0.0
    l_u: float = 0.0
    l_p: float = 0.0
    l_s: float = 0.0
    total: float = 0.0
    weights: tuple = (1.0, 1.0, 1.0, 1.0)
    n_certain: int = 0
    void_warning: bool = False


def _check_probs(p, name):
    if np.any(p.data < -1e-9) or np.any(p.data > 1.0 + 1e-9):
        raise ValueError(f"{name}: probabilities outside [0, 1]")


def loss_consistency(p_f, p_g, m_gamma):
    """Masked mean cross-entropy H[p_f, p_g] over pixels deemed certain.

    p_f, p_g: (N, K, H, W) aligned probability maps (f-branch weights the
    log of the g-branch, matching the asymmetric update). Returns 0 when
    no pixel is certain.
    """
    p_f, p_g = ad.as_tensor(p_f), ad.as_tensor(p_g)
    _check_probs(p_f, "loss_consistency p_f")
    _check_probs(p_g, "loss_consistency p_g")
    m = np.asarray(m_gamma, dtype=np.float64)
    ce = ad.negate(ad.tsum_axis(ad.mul(p_f, ad.log(p_g, floor=LOG_FLOOR)), axis=1))
    return ad.masked_mean(ce, m)


def loss_uniformity(z, pool=4, t=UNIFORMITY_T):
    """Pairwise RBF repulsion of pooled target embeddings on the hypersphere.

    z: (N, F, h, w) unit embeddings; pooled by ``pool`` before the pairwise
    term, summed over ordered pairs i != j and divided by the pooled count.
    """
    z = ad.as_tensor(z)
    n, f, h, w = z.shape
    if h >= pool and w >= pool and (h % pool == 0) and (w % pool == 0):
        z = ad.avg_pool(z, pool)
        h, w = h // pool, w // pool
    rows = ad.reshape(ad.transpose(z, (0, 2, 3, 1)), (n * h * w, f))
    count = n * h * w
    if count < 2:
        return ad.Tensor(0.0)
    d = ad.pairwise_sqdist(rows)
    e = ad.exp(ad.scale(d, -t))
    off_diagonal = 1.0 - np.eye(count)
    return ad.scale(ad.tsum(ad.mul(e, ad.Tensor(off_diagonal))), 1.0 / count)


def loss_prototype(bank):
    """Mean nearest-neighbour cosine similarity between prototypes (self excluded)."""
    vec = bank.vectors if hasattr(bank, "vectors") else ad.as_tensor(bank)
    k = vec.shape[1]
    if k < 2:
        raise ValueError(f"loss_prototype: needs at least 2 prototypes, got {k}")
    gram = ad.matmul(ad.transpose(vec, (1, 0)), vec)
    shifted = ad.add(gram, ad.Tensor(-2.0 * np.eye(k)))
    return ad.scale(ad.tsum(ad.tmax(shifted, axis=1)), 1.0 / k)


def loss_supervised(probs, labels):
    """Mean negative log-likelihood over non-void pixels of the head branch.

    probs: (N, K, H, W); labels: (N, H, W) with -1 marking void. Returns
    (loss, void_warning) where the warning flags an all-void batch.
    """
    probs = ad.as_tensor(probs)
    _check_probs(probs, "loss_supervised")
    labels = np.asarray(labels)
    k = probs.shape[1]
    valid = (labels >= 0) & (labels < k)
    onehot = np.zeros(probs.shape)
    idx = np.nonzero(valid)
    onehot[idx[0], labels[valid], idx[1], idx[2]] = 1.0
    nll = ad.negate(ad.tsum_axis(ad.mul(ad.Tensor(onehot), ad.log(probs, floor=LOG_FLOOR)), axis=1))
    loss = ad.masked_mean(nll, valid.astype(np.float64))
    return loss, not valid.any()


def total_loss(l_c, l_u, l_p, l_s, weights=(1.0, 1.0, 1.0, 1.0), n_certain=0, void_warning=False):
    """Weighted sum; components may be autodiff tensors or plain floats."""
    parts = [ad.as_tensor(x) for x in (l_c, l_u, l_p, l_s)]
    names = ("l_c", "l_u", "l_p", "l_s")
    for name, part in zip(names, parts):
        if not np.isfinite(part.data):
            raise ValueError(f"total_loss: non-finite component {name}")
    total = ad.Tensor(0.0)
    for wgt, part in zip(weights, parts):
        total = ad.add(total, ad.scale(part, wgt))
    report = LossReport(
        l_c=float(parts[0].data),
        l_u=float(parts[1].data),
        l_p=float(parts[2].data),
        l_s=float(parts[3].data),
        total=float(total.data),
        weights=tuple(weights),
        n_certain=int(n_certain),
        void_warning=void_warning,
    )
    return total, report
