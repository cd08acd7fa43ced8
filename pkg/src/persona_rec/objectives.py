"""Click head, ranking loss, and the cross-view contrastive objective.

The ranking loss is computed entirely in the log domain: with s the
pre-sigmoid click score, log sigmoid(s) = -softplus(-s), and the per-sample
term -log(y+ / sum y) becomes logsumexp(logs) - log y+. This is exactly the
ratio form, but stays finite even when sigmoids saturate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import _LEAKY_SLOPE, encode_user, glorot, glorot_vec, zeros_vec
from .errors import ConfigurationError, DegenerateInputError


@dataclass
class TrainingSample:
    user_id: str
    positive: str
    negatives: list
    history: list           # news ids, oldest to newest
    impression_id: str = ""


@dataclass
class ContrastiveBatch:
    anchors: list            # per-user u_l projections [d_p]
    positives: list          # per-user u_l+ projections [d_p]

    def __len__(self):
        return len(self.anchors)


@dataclass
class ClickParams:
    """Two-block form of the click MLP: V_c (u ++ r) == wu u + wr r."""

    wu: Tensor
    wr: Tensor
    b: Tensor
    q: Tensor

    def named_parameters(self) -> dict:
        return {"wu": self.wu, "wr": self.wr, "b": self.b, "q": self.q}


@dataclass
class CrossViewParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named_parameters(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def init_click_params(rng: np.random.Generator, d_r: int, d_c: int,
                      dtype=np.float32) -> ClickParams:
    return ClickParams(wu=glorot(rng, d_r, d_c, dtype), wr=glorot(rng, d_r, d_c, dtype),
                       b=zeros_vec(d_c, dtype), q=glorot_vec(rng, d_c, dtype))


def init_cl_params(rng: np.random.Generator, d_r: int, hidden: int, d_p: int,
                   dtype=np.float32) -> CrossViewParams:
    return CrossViewParams(w1=glorot(rng, d_r, hidden, dtype), b1=zeros_vec(hidden, dtype),
                           w2=glorot(rng, hidden, d_p, dtype), b2=zeros_vec(d_p, dtype))


def click_logit(u: Tensor, r_c: Tensor, params: ClickParams) -> Tensor:
    """Pre-sigmoid click score (0-d tensor)."""
    hidden = ad.leaky_relu(
        ad.add(ad.add(ad.matmul(u, params.wu), ad.matmul(r_c, params.wr)), params.b),
        _LEAKY_SLOPE)
    return ad.dot(params.q, hidden)


def click_probability(u: Tensor, r_c: Tensor, params: ClickParams) -> Tensor:
    """Click probability, strictly inside (0,1)."""
    return ad.sigmoid(click_logit(u, r_c, params))


def _element(vec: Tensor, i: int) -> Tensor:
    onehot = np.zeros(vec.shape[0], dtype=vec.data.dtype)
    onehot[i] = 1.0
    return ad.dot(vec, ad.constant(onehot))


def logsumexp(vec: Tensor) -> Tensor:
    """Stable log-sum-exp of a 1D tensor (max detached; gradient unchanged)."""
    m = ad.constant(np.asarray(vec.data.max(), dtype=vec.data.dtype))
    return ad.add(ad.log(ad.tsum(ad.exp(ad.sub(vec, m)))), m)


def log_sigmoid(logit: Tensor) -> Tensor:
    return ad.neg(ad.softplus(ad.neg(logit)))


def sample_rec_loss(logits: Tensor, pos_index: int = 0) -> Tensor:
    """-log(y_pos / sum_i y_i) for one positive and its sampled negatives.

    ``logits`` are pre-sigmoid click scores, positive at ``pos_index``.
    """
    lp = log_sigmoid(logits)
    return ad.sub(logsumexp(lp), _element(lp, pos_index))


def rec_loss(sample_logits) -> Tensor:
    """Batch mean of per-sample ranking losses (positive first in each vector)."""
    sample_logits = list(sample_logits)
    if not sample_logits:
        raise DegenerateInputError("recommendation loss over an empty batch")
    losses = ad.stack_scalars([sample_rec_loss(v) for v in sample_logits])
    return ad.scale(ad.tsum(losses), 1.0 / len(sample_logits))


def project_view(u: Tensor, params: CrossViewParams) -> Tensor:
    """Shared two-layer projection applied to both contrastive views."""
    h = ad.leaky_relu(ad.add(ad.matmul(u, params.w1), params.b1), _LEAKY_SLOPE)
    return ad.leaky_relu(ad.add(ad.matmul(h, params.w2), params.b2), _LEAKY_SLOPE)


def cross_view_views(titles, abstracts, persona_emb, persona_mask, news_params,
                     user_params, cl_params: CrossViewParams, backend,
                     rng: np.random.Generator, rho: float = 0.2,
                     training: bool = False, dropout: float = 0.0,
                     drop_rng: np.random.Generator = None):
    """Two projected views of one user: abstracts, and dropped+shuffled titles.

    Returns (u_l, u_l_plus), or None when no history item has abstract text
    (the sample then contributes only to the ranking loss). In eval mode the
    title-set dropout and shuffle are identity operations.
    """
    usable = [i for i, a in enumerate(abstracts) if a.mask.any()]
    if not usable:
        return None
    abs_seqs = [abstracts[i] for i in usable]
    u_a = encode_user(abs_seqs, np.ones(len(abs_seqs), dtype=bool), persona_emb,
                      persona_mask, news_params, user_params, backend,
                      training=training, dropout=dropout, rng=drop_rng).u

    order = np.arange(len(titles))
    if training:
        kept = order[rng.random(len(titles)) >= rho]
        if kept.size == 0:
            kept = np.array([rng.integers(len(titles))])
        order = rng.permutation(kept)
    title_seqs = [titles[i] for i in order]
    u_t = encode_user(title_seqs, np.ones(len(title_seqs), dtype=bool), persona_emb,
                      persona_mask, news_params, user_params, backend,
                      training=training, dropout=dropout, rng=drop_rng).u

    return project_view(u_a, cl_params), project_view(u_t, cl_params)


def contrastive_loss(batch: ContrastiveBatch, tau: float) -> Tensor:
    """InfoNCE over in-batch negatives: for each anchor, the other users'
    positive projections are its negatives."""
    if tau <= 0:
        raise ConfigurationError(f"temperature must be positive, got {tau}")
    n = len(batch)
    if n < 2:
        raise DegenerateInputError(f"contrastive batch needs at least 2 users, got {n}")
    inv_tau = 1.0 / tau
    losses = []
    for l in range(n):
        sims = ad.stack_scalars([
            ad.scale(ad.dot(batch.anchors[l], batch.positives[i]), inv_tau)
            for i in range(n)])
        losses.append(ad.sub(logsumexp(sims), _element(sims, l)))
    return ad.scale(ad.tsum(ad.stack_scalars(losses)), 1.0 / n)


def joint_loss(rec: Tensor, cl, lam: float) -> Tensor:
    """Total objective: ranking loss plus lam times the contrastive loss."""
    if lam < 0:
        raise ConfigurationError(f"loss weight must be nonnegative, got {lam}")
    if cl is None or lam == 0.0:
        return rec
    return ad.add(rec, ad.scale(cl, lam))
