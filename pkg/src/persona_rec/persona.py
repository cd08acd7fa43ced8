"""Explicit persona construction.

A user's persona is a fixed-capacity set of entity ids distilled from the
prominent entities of their most recent reads: take the G most recent
history items, keep each item's first K listed entities, pool and dedupe,
rank, and cap at n_e.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, embedding_rows
from .errors import DataError
from .text import PAD_ID, Vocabulary

# Entity ids share the vocabulary machinery (PAD=0, UNK=1, contiguous ids).
EntityVocabulary = Vocabulary


@dataclass
class Persona:
    user_id: str
    entity_ids: np.ndarray          # [n_e], PAD-padded
    mask: np.ndarray                # [n_e], true = real entity
    provenance: dict = field(default_factory=dict)  # entity id -> news ids it came from

    def __post_init__(self):
        self.entity_ids = np.asarray(self.entity_ids, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)

    @property
    def n_real(self) -> int:
        return int(self.mask.sum())

    @property
    def is_cold(self) -> bool:
        return not self.mask.any()


def build_persona(user_id: str, history, entities_by_news, G: int, K: int,
                  n_e: int) -> Persona:
    """Select persona entities from a chronological history (most recent last).

    From the G most recent items take the first K listed entities each,
    then rank the pooled distinct entities by: frequency across those items
    (descending), then recency of first appearance scanning newest to
    oldest, then position within that item, then entity id. Keeps the top
    n_e; an empty history yields the all-masked cold-start persona.
    """
    if G < 1 or K < 1 or n_e < 1:
        raise ValueError(f"G, K, n_e must all be >= 1, got {G}, {K}, {n_e}")
    recent = list(history)[-G:]
    freq: dict = {}
    first_seen: dict = {}
    provenance: dict = {}
    # Scan newest to oldest so first_seen records the most recent appearance.
    for age, news_id in enumerate(reversed(recent)):
        try:
            entities = entities_by_news[news_id]
        except KeyError:
            raise DataError(f"history references unknown news id {news_id!r}")
        for pos, ent in enumerate(entities[:K]):
            freq[ent] = freq.get(ent, 0) + 1
            if ent not in first_seen:
                first_seen[ent] = (age, pos)
            provenance.setdefault(ent, []).append(news_id)
    ranked = sorted(freq, key=lambda e: (-freq[e], first_seen[e], e))
    chosen = ranked[:n_e]
    ids = np.full(n_e, PAD_ID, dtype=np.int64)
    mask = np.zeros(n_e, dtype=bool)
    ids[: len(chosen)] = chosen
    mask[: len(chosen)] = True
    return Persona(user_id=user_id, entity_ids=ids, mask=mask,
                   provenance={e: provenance[e] for e in chosen})


def persona_embeddings(p: Persona, entity_table: Tensor) -> Tensor:
    """Embed persona entities as an [n_e x d_e] matrix; masked rows are zero."""
    return embedding_rows(entity_table, p.entity_ids, p.mask)


def persona_report_line(p: Persona, entity_vocab: EntityVocabulary) -> str:
    """One explainable text line: user id, tab, entities with source news ids."""
    parts = []
    for ent, real in zip(p.entity_ids, p.mask):
        if not real:
            continue
        ent = int(ent)
        sources = ",".join(dict.fromkeys(p.provenance.get(ent, [])))
        parts.append(f"{entity_vocab.token_of(ent)} ({sources})")
    return f"{p.user_id}\t" + ", ".join(parts)
