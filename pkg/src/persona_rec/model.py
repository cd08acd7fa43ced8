"""Full recommender assembly.

Ties together the text backend, the shared entity table, the two
persona-aware encoders, the click head, and (optionally) the cross-view
projection head, and exposes the handful of forward entry points the
trainer, evaluator, and CLI need. All state lives in named tensors so
checkpoints are a flat keyed map.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import objectives as obj
from .autodiff import Tensor
from .encoders import (
    encode_news,
    encode_user,
    init_news_params,
    init_user_params,
)
from .errors import ColdStartError, ConfigurationError, DataError
from .objectives import init_cl_params, init_click_params
from .persona import Persona, build_persona, persona_embeddings
from .text import PAD_ID, UNK_ID, TokenSequence, TrainableTextBackend


class RecommenderModel:
    """Persona-aware two-tower model over a fixed news store.

    Variant flags:
      use_persona=False swaps the entity vocabulary for a 2-row table
        (PAD + one learned pseudo-entity) and gives every user the same
        single-entity persona, collapsing both entity attentions to plain
        additive pooling.
      use_cl=False omits the cross-view projection head entirely.
      abstract_as_title feeds title+abstract tokens (truncated to n_w) to
        the news encoder; it requires use_cl=False since the title/abstract
        split is what defines the two contrastive views.
    """

    def __init__(self, vocab, entity_vocab, news_store, *, d_w, d_e, d_r, d_p,
                 heads, n_w, n_u, n_e, top_k, top_g, dropout, rng,
                 use_persona=True, use_cl=True, abstract_as_title=False,
                 rho_cl=0.2, dtype=np.float32, backend=None):
        if abstract_as_title and use_cl:
            raise ConfigurationError(
                "abstract_as_title folds abstracts into the ranking input, so the "
                "cross-view objective has no second view; set use_cl=False")
        self.vocab = vocab
        self.entity_vocab = entity_vocab
        self.news_store = dict(news_store)
        self.n_w = n_w
        self.n_u = n_u
        self.n_e = n_e if use_persona else 1
        self.top_k = top_k
        self.top_g = top_g
        self.dropout = dropout
        self.use_persona = use_persona
        self.use_cl = use_cl
        self.abstract_as_title = abstract_as_title
        self.rho_cl = rho_cl
        self.dtype = dtype

        n_entities = len(entity_vocab) if use_persona else 2
        self.entity_table = Tensor(
            rng.uniform(-0.1, 0.1, size=(n_entities, d_e)).astype(dtype),
            requires_grad=True)
        self.backend = backend if backend is not None else TrainableTextBackend(
            len(vocab), d_w, rng, dtype)
        self.news_params = init_news_params(
            rng, self.backend.d_w, d_e, d_r, heads, self.entity_table, dtype)
        self.user_params = init_user_params(rng, d_e, d_r, heads, dtype)
        self.click_params = init_click_params(rng, d_r, d_r, dtype)
        self.cl_params = init_cl_params(rng, d_r, d_r, d_p, dtype) if use_cl else None

        self._entities_by_news = {nid: item.entity_ids
                                  for nid, item in self.news_store.items()}
        self._input_cache = {}

    # -- parameter plumbing -------------------------------------------------

    def named_parameters(self) -> dict:
        out = dict(self.backend.parameters())
        out["entities.table"] = self.entity_table
        for prefix, group in (("news", self.news_params),
                              ("user", self.user_params),
                              ("click", self.click_params),
                              ("cl", self.cl_params)):
            if group is None:
                continue
            for name, p in group.named_parameters().items():
                out[f"{prefix}.{name}"] = p
        return out

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.named_parameters().values())

    # -- static per-news inputs ----------------------------------------------

    def news_input(self, news_id: str) -> TokenSequence:
        """Token sequence the news encoder consumes for one article."""
        seq = self._input_cache.get(news_id)
        if seq is not None:
            return seq
        item = self.news_store.get(news_id)
        if item is None:
            raise DataError(f"unknown news id {news_id!r}")
        if self.abstract_as_title:
            ids = list(item.title.ids[item.title.mask])
            ids += list(item.abstract.ids[item.abstract.mask])
            ids = ids[: self.n_w]
            k = len(ids)
            ids = np.array(ids + [PAD_ID] * (self.n_w - k), dtype=np.int64)
            mask = np.arange(self.n_w) < k
            seq = TokenSequence(ids, mask)
        else:
            seq = item.title
        self._input_cache[news_id] = seq
        return seq

    # -- persona -------------------------------------------------------------

    def persona_for(self, user_id: str, history) -> Persona:
        if not self.use_persona:
            return Persona(user_id, np.array([UNK_ID]), np.array([True]), {})
        return build_persona(user_id, history, self._entities_by_news,
                             self.top_g, self.top_k, self.n_e)

    def persona_tensors(self, persona: Persona):
        return persona_embeddings(persona, self.entity_table), persona.mask

    # -- forward entry points --------------------------------------------------

    def encode_candidate(self, news_id, persona_emb, persona_mask,
                         training=False, rng=None):
        return encode_news(self.news_input(news_id), persona_emb, persona_mask,
                           self.news_params, self.backend,
                           training=training,
                           dropout=self.dropout if training else 0.0, rng=rng)

    def user_representation(self, history, persona_emb, persona_mask,
                            training=False, rng=None):
        if not history:
            raise ColdStartError("empty click history; user cannot be encoded")
        texts = [self.news_input(nid) for nid in history]
        hist_mask = np.ones(len(texts), dtype=bool)
        return encode_user(texts, hist_mask, persona_emb, persona_mask,
                           self.news_params, self.user_params, self.backend,
                           training=training,
                           dropout=self.dropout if training else 0.0, rng=rng)

    def sample_logits(self, sample, training=False, rng=None) -> Tensor:
        """Click logits for one training sample, positive candidate first."""
        persona = self.persona_for(sample.user_id, sample.history)
        emb, pmask = self.persona_tensors(persona)
        user_rep = self.user_representation(sample.history, emb, pmask,
                                            training=training, rng=rng)
        logits = []
        for news_id in [sample.positive] + list(sample.negatives):
            cand = self.encode_candidate(news_id, emb, pmask,
                                         training=training, rng=rng)
            logits.append(obj.click_logit(user_rep.u, cand.r, self.click_params))
        return ad.stack_scalars(logits)

    def user_views(self, user_id, history, rng, training=True):
        """Cross-view pair (abstract view, title view) for one user."""
        if self.cl_params is None:
            raise ConfigurationError("model was built without the cross-view head")
        titles = [self.news_store[nid].title for nid in history]
        abstracts = [self.news_store[nid].abstract for nid in history]
        persona = self.persona_for(user_id, history)
        emb, pmask = self.persona_tensors(persona)
        return obj.cross_view_views(
            titles, abstracts, emb, pmask, self.news_params, self.user_params,
            self.cl_params, self.backend, rng, rho=self.rho_cl,
            training=training, dropout=self.dropout if training else 0.0,
            drop_rng=rng)

    def score_impression(self, imp) -> np.ndarray:
        """Eval-mode click probabilities for every candidate of an impression."""
        if not imp.history:
            raise ColdStartError(
                f"impression {imp.impression_id}: user {imp.user_id} has no history")
        with ad.no_grad():
            persona = self.persona_for(imp.user_id, imp.history)
            emb, pmask = self.persona_tensors(persona)
            user_rep = self.user_representation(imp.history, emb, pmask)
            out = []
            for news_id, _label in imp.candidates:
                cand = self.encode_candidate(news_id, emb, pmask)
                prob = obj.click_probability(user_rep.u, cand.r, self.click_params)
                out.append(float(prob.data))
        return np.array(out, dtype=np.float64)
