"""Persona-aware news and user encoders.

The news encoder turns one token sequence plus the reader's persona
entities into a single vector: token embeddings pass through two dense
layers, self-attention mixes the terms, each persona entity attends over
the terms through a bilinear form, and an additive attention layer pools
the per-entity summaries. The user encoder runs the news encoder over the
reading history, self-attends across the resulting vectors, lets each
persona entity attend over them, and pools the same way.

Both encoders return their attention maps so rankings can be explained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ColdStartError, DegenerateInputError
from .text import UNK_ID, TokenSequence, encode_tokens

_LEAKY_SLOPE = 0.01


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float32) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype),
                  requires_grad=True)


def glorot_vec(rng: np.random.Generator, n: int, dtype=np.float32) -> Tensor:
    limit = math.sqrt(6.0 / (n + 1))
    return Tensor(rng.uniform(-limit, limit, size=n).astype(dtype), requires_grad=True)


def zeros_vec(n: int, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)


@dataclass
class MhaParams:
    wq: list
    wk: list
    wv: list
    wo: Tensor

    def named(self, prefix: str) -> dict:
        out = {}
        for h in range(len(self.wq)):
            out[f"{prefix}.wq{h}"] = self.wq[h]
            out[f"{prefix}.wk{h}"] = self.wk[h]
            out[f"{prefix}.wv{h}"] = self.wv[h]
        out[f"{prefix}.wo"] = self.wo
        return out


def init_mha(rng: np.random.Generator, d: int, heads: int, dtype=np.float32) -> MhaParams:
    d_h = d // heads
    if d_h * heads != d:
        raise ValueError(f"dimension {d} not divisible by {heads} heads")
    return MhaParams(
        wq=[glorot(rng, d, d_h, dtype) for _ in range(heads)],
        wk=[glorot(rng, d, d_h, dtype) for _ in range(heads)],
        wv=[glorot(rng, d, d_h, dtype) for _ in range(heads)],
        wo=glorot(rng, d, d, dtype),
    )


@dataclass
class NewsEncoderParams:
    """Everything the news encoder learns.

    ``entity_table`` is a reference to the shared entity embedding table,
    used only for the cold-start fallback; it is owned (and named) by the
    model, so ``named_parameters`` here excludes it.
    """

    dense1_w: Tensor
    dense1_b: Tensor
    dense2_w: Tensor
    dense2_b: Tensor
    mha: MhaParams
    ent_w: Tensor
    ent_b: Tensor
    bilinear: Tensor
    pool_w: Tensor
    pool_b: Tensor
    pool_q: Tensor
    entity_table: Tensor = field(repr=False, default=None)

    def named_parameters(self) -> dict:
        out = {
            "dense1_w": self.dense1_w, "dense1_b": self.dense1_b,
            "dense2_w": self.dense2_w, "dense2_b": self.dense2_b,
        }
        out.update(self.mha.named("mha"))
        out.update({
            "ent_w": self.ent_w, "ent_b": self.ent_b, "bilinear": self.bilinear,
            "pool_w": self.pool_w, "pool_b": self.pool_b, "pool_q": self.pool_q,
        })
        return out


@dataclass
class UserEncoderParams:
    mha: MhaParams
    ent_w: Tensor
    ent_b: Tensor
    score_we: Tensor
    score_wz: Tensor
    score_b: Tensor
    score_q: Tensor
    pool_w: Tensor
    pool_b: Tensor
    pool_q: Tensor

    def named_parameters(self) -> dict:
        out = dict(self.mha.named("mha"))
        out.update({
            "ent_w": self.ent_w, "ent_b": self.ent_b,
            "score_we": self.score_we, "score_wz": self.score_wz,
            "score_b": self.score_b, "score_q": self.score_q,
            "pool_w": self.pool_w, "pool_b": self.pool_b, "pool_q": self.pool_q,
        })
        return out


def init_news_params(rng: np.random.Generator, d_w: int, d_e: int, d_r: int,
                     heads: int, entity_table: Tensor, dtype=np.float32) -> NewsEncoderParams:
    return NewsEncoderParams(
        dense1_w=glorot(rng, d_w, d_r, dtype), dense1_b=zeros_vec(d_r, dtype),
        dense2_w=glorot(rng, d_r, d_r, dtype), dense2_b=zeros_vec(d_r, dtype),
        mha=init_mha(rng, d_r, heads, dtype),
        ent_w=glorot(rng, d_e, d_r, dtype), ent_b=zeros_vec(d_r, dtype),
        bilinear=glorot(rng, d_r, d_r, dtype),
        pool_w=glorot(rng, d_r, d_r, dtype), pool_b=zeros_vec(d_r, dtype),
        pool_q=glorot_vec(rng, d_r, dtype),
        entity_table=entity_table,
    )


def init_user_params(rng: np.random.Generator, d_e: int, d_r: int, heads: int,
                     dtype=np.float32) -> UserEncoderParams:
    return UserEncoderParams(
        mha=init_mha(rng, d_r, heads, dtype),
        ent_w=glorot(rng, d_e, d_r, dtype), ent_b=zeros_vec(d_r, dtype),
        score_we=glorot(rng, d_r, d_r, dtype), score_wz=glorot(rng, d_r, d_r, dtype),
        score_b=zeros_vec(d_r, dtype), score_q=glorot_vec(rng, d_r, dtype),
        pool_w=glorot(rng, d_r, d_r, dtype), pool_b=zeros_vec(d_r, dtype),
        pool_q=glorot_vec(rng, d_r, dtype),
    )


@dataclass
class NewsRepresentation:
    r: Tensor                 # [d_r]
    entity_attention: Tensor  # [n_e], sums to 1 over unmasked entities
    term_attention: Tensor    # [n_e x n_w], rows sum to 1 over unmasked terms
    persona_mask: np.ndarray  # mask actually used (after cold-start fallback)


@dataclass
class UserRepresentation:
    u: Tensor                 # [d_r]
    entity_attention: Tensor  # [n_e]
    news_attention: Tensor    # [n_e x n_u]
    persona_mask: np.ndarray


def effective_persona(persona_emb: Tensor, persona_mask, params: NewsEncoderParams):
    """Cold-start fallback: an all-masked persona becomes one learned UNK row."""
    m = np.asarray(persona_mask, dtype=bool)
    if m.any():
        return persona_emb, m
    emb = ad.embedding_rows(params.entity_table, np.array([UNK_ID]), np.array([True]))
    return emb, np.array([True])


def _mha(x: Tensor, p: MhaParams, mask) -> Tensor:
    return ad.multi_head_self_attention(x, p.wq, p.wk, p.wv, p.wo, mask)


def encode_news(text: TokenSequence, persona_emb: Tensor, persona_mask,
                params: NewsEncoderParams, backend, training: bool = False,
                dropout: float = 0.0, rng: np.random.Generator = None) -> NewsRepresentation:
    """Encode one news text under one persona.

    Requires at least one real token. An all-masked persona falls back to
    the learned UNK entity so the attention stays well defined; the returned
    attention maps then cover that single substitute entity.
    """
    if not text.mask.any():
        raise DegenerateInputError("news text has zero unmasked tokens")
    emb, mask = effective_persona(persona_emb, persona_mask, params)

    x = encode_tokens(text, backend)                                   # [n_w, d_w]
    x = ad.dropout(x, dropout, training, rng)
    h = ad.leaky_relu(ad.add(ad.matmul(x, params.dense1_w), params.dense1_b), _LEAKY_SLOPE)
    h = ad.add(ad.matmul(h, params.dense2_w), params.dense2_b)         # [n_w, d_r]
    t = _mha(h, params.mha, text.mask)                                 # [n_w, d_r]
    t = ad.dropout(t, dropout, training, rng)

    eprime = ad.leaky_relu(ad.add(ad.matmul(emb, params.ent_w), params.ent_b), _LEAKY_SLOPE)
    scores = ad.matmul(ad.matmul(eprime, params.bilinear), ad.transpose(t))  # [n_e, n_w]
    term_attention = ad.softmax_masked(scores, text.mask)
    summaries = ad.matmul(term_attention, t)                           # [n_e, d_r]

    pooled = ad.tanh(ad.add(ad.matmul(summaries, params.pool_w), params.pool_b))
    entity_scores = ad.matmul(pooled, params.pool_q)                   # [n_e]
    entity_attention = ad.softmax_masked(entity_scores, mask)
    r = ad.matmul(entity_attention, summaries)                         # [d_r]
    return NewsRepresentation(r=r, entity_attention=entity_attention,
                              term_attention=term_attention, persona_mask=mask)


def encode_user(history_texts, history_mask, persona_emb: Tensor, persona_mask,
                news_params: NewsEncoderParams, user_params: UserEncoderParams,
                backend, training: bool = False, dropout: float = 0.0,
                rng: np.random.Generator = None,
                history_vectors=None) -> UserRepresentation:
    """Encode a reading history under one persona.

    ``history_vectors`` optionally supplies precomputed news vectors (one
    per unmasked history item, same order); when given, the per-item news
    encoding step is skipped. Requires at least one unmasked history item.
    """
    hmask = np.asarray(history_mask, dtype=bool)
    if len(history_texts) == 0 or not hmask.any():
        raise ColdStartError("user has no readable history")
    emb, pmask = effective_persona(persona_emb, persona_mask, news_params)

    dtype = user_params.score_q.data.dtype
    zero = ad.constant(np.zeros(user_params.pool_w.shape[0], dtype=dtype))
    rows = []
    supplied = iter(history_vectors) if history_vectors is not None else None
    for seq, ok in zip(history_texts, hmask):
        if not ok:
            rows.append(zero)
        elif supplied is not None:
            rows.append(next(supplied))
        else:
            rows.append(encode_news(seq, emb, pmask, news_params, backend,
                                    training=training, dropout=dropout, rng=rng).r)
    v = ad.stack_rows(rows)                                            # [n_u, d_r]
    z = _mha(v, user_params.mha, hmask)
    z = ad.dropout(z, dropout, training, rng)

    eprime = ad.leaky_relu(ad.add(ad.matmul(emb, user_params.ent_w), user_params.ent_b),
                           _LEAKY_SLOPE)
    se = ad.matmul(eprime, user_params.score_we)                       # [n_e, d_r]
    sz = ad.matmul(z, user_params.score_wz)                            # [n_u, d_r]
    score_rows = []
    for i in range(se.shape[0]):
        act = ad.leaky_relu(ad.add(ad.add(sz, ad.get_row(se, i)), user_params.score_b),
                            _LEAKY_SLOPE)
        score_rows.append(ad.matmul(act, user_params.score_q))         # [n_u]
    scores = ad.stack_rows(score_rows)                                 # [n_e, n_u]
    news_attention = ad.softmax_masked(scores, hmask)
    summaries = ad.matmul(news_attention, z)                           # [n_e, d_r]

    pooled = ad.tanh(ad.add(ad.matmul(summaries, user_params.pool_w), user_params.pool_b))
    entity_scores = ad.matmul(pooled, user_params.pool_q)
    entity_attention = ad.softmax_masked(entity_scores, pmask)
    u = ad.matmul(entity_attention, summaries)
    return UserRepresentation(u=u, entity_attention=entity_attention,
                              news_attention=news_attention, persona_mask=pmask)
