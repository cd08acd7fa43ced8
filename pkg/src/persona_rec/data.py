"""MIND-format ingestion: news store, impressions, and training samples.

news.tsv: 8 tab-separated columns per line -- id, category, subcategory,
title, abstract, url, title entities (JSON array of objects carrying
"WikidataId"), abstract entities (same). behaviors.tsv: 5 columns --
impression id, user id, time, space-separated history ids, space-separated
"newsid-label" candidates.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np

from .errors import ParseError
from .objectives import TrainingSample
from .persona import EntityVocabulary
from .text import TokenSequence, Vocabulary, make_sequence, tokenize

logger = logging.getLogger("persona_rec.data")

_TIME_FORMAT = "%m/%d/%Y %I:%M:%S %p"


@dataclass
class NewsItem:
    news_id: str
    title: TokenSequence
    abstract: TokenSequence
    entity_ids: list                 # contiguous ids, title entities then abstract
    raw_title: str = ""
    raw_abstract: str = ""
    category: str = ""
    subcategory: str = ""
    url: str = ""
    title_entities: list = field(default_factory=list)     # WikidataId strings
    abstract_entities: list = field(default_factory=list)


@dataclass
class Impression:
    impression_id: str
    user_id: str
    time_str: str
    history: list                    # news ids, oldest to newest
    candidates: list                 # (news id, 0/1 label) pairs

    @property
    def when(self):
        try:
            return datetime.strptime(self.time_str, _TIME_FORMAT)
        except ValueError:
            return None


def _entity_wikidata_ids(raw: str, where: str) -> list:
    if not raw.strip():
        return []
    try:
        parsed = json.loads(raw)
        return [obj["WikidataId"] for obj in parsed]
    except (json.JSONDecodeError, TypeError, KeyError):
        logger.warning("malformed entity JSON at %s; treating as no entities", where)
        return []


def parse_news_file(path, vocab: Vocabulary, entity_vocab: EntityVocabulary,
                    n_w: int = 20, build_vocab: bool = False,
                    entity_source: str = "title+abstract") -> dict:
    """Parse news.tsv into a news-id keyed store.

    With build_vocab (training split) unseen words and entities are added to
    the vocabularies; otherwise they map to UNK. ``entity_source`` limits
    persona entities to "title" or uses "title+abstract" (the default).
    """
    if entity_source not in ("title+abstract", "title"):
        raise ParseError(f"entity_source must be 'title+abstract' or 'title', got {entity_source!r}")
    store: dict = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 8:
                raise ParseError(f"{path}, line {lineno}: expected 8 columns, got {len(cols)}")
            nid, category, subcategory, title, abstract, url, t_ents, a_ents = cols
            title_tokens = tokenize(title)
            if not title_tokens:
                raise ParseError(f"{path}, line {lineno}: news {nid!r} has an empty title")
            abstract_tokens = tokenize(abstract)
            if build_vocab:
                for tok in title_tokens + abstract_tokens:
                    vocab.add(tok)
            t_wiki = _entity_wikidata_ids(t_ents, f"{path}:{lineno} title")
            a_wiki = _entity_wikidata_ids(a_ents, f"{path}:{lineno} abstract")
            wiki = t_wiki + (a_wiki if entity_source == "title+abstract" else [])
            if build_vocab:
                entity_ids = [entity_vocab.add(w) for w in wiki]
            else:
                entity_ids = [entity_vocab.id_of(w) for w in wiki]
            store[nid] = NewsItem(
                news_id=nid,
                title=make_sequence(title_tokens, vocab, n_w),
                abstract=make_sequence(abstract_tokens, vocab, n_w),
                entity_ids=entity_ids,
                raw_title=title, raw_abstract=abstract,
                category=category, subcategory=subcategory, url=url,
                title_entities=t_wiki, abstract_entities=a_wiki,
            )
    return store


def serialize_news_item(item: NewsItem) -> str:
    def ents(wiki):
        return json.dumps([{"WikidataId": w} for w in wiki]) if wiki else "[]"

    return "\t".join([item.news_id, item.category, item.subcategory, item.raw_title,
                      item.raw_abstract, item.url, ents(item.title_entities),
                      ents(item.abstract_entities)])


def write_news_file(path, items) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for item in items:
            f.write(serialize_news_item(item) + "\n")


def parse_behaviors_file(path, news_store: dict, n_u: int = 20) -> list:
    """Parse behaviors.tsv; histories keep only the newest n_u items.

    Records referencing news ids absent from the store are skipped with a
    warning. A malformed candidate token is an error.
    """
    impressions = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 5:
                raise ParseError(f"{path}, line {lineno}: expected 5 columns, got {len(cols)}")
            imp_id, user_id, time_str, hist_field, cand_field = cols
            history = hist_field.split() if hist_field.strip() else []
            candidates = []
            ok = True
            for token in cand_field.split():
                nid, sep, label = token.rpartition("-")
                if not sep or label not in ("0", "1"):
                    raise ParseError(
                        f"{path}, line {lineno}: candidate {token!r} lacks a -0/-1 label")
                candidates.append((nid, int(label)))
            for nid in history + [c[0] for c in candidates]:
                if nid not in news_store:
                    logger.warning("%s, line %d: skipping record with unknown news id %r",
                                   path, lineno, nid)
                    ok = False
                    break
            if not ok:
                continue
            impressions.append(Impression(imp_id, user_id, time_str,
                                          history[-n_u:], candidates))
    return impressions


def serialize_impression(imp: Impression) -> str:
    cands = " ".join(f"{nid}-{label}" for nid, label in imp.candidates)
    return "\t".join([imp.impression_id, imp.user_id, imp.time_str,
                      " ".join(imp.history), cands])


def write_behaviors_file(path, impressions) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for imp in impressions:
            f.write(serialize_impression(imp) + "\n")


def make_training_samples(impressions, H: int, rng: np.random.Generator) -> list:
    """One sample per clicked candidate with H negatives from its impression.

    Negatives are drawn uniformly without replacement, falling back to with
    replacement when fewer than H exist. Impressions with no history (cold
    start) or no negatives produce no samples.
    """
    if H < 1:
        raise ValueError(f"H must be >= 1, got {H}")
    samples = []
    for imp in impressions:
        if not imp.history:
            continue
        positives = [nid for nid, label in imp.candidates if label == 1]
        pool = [nid for nid, label in imp.candidates if label == 0]
        if positives and not pool:
            logger.warning("impression %s has no negatives; skipped", imp.impression_id)
            continue
        for pos in positives:
            replace = len(pool) < H
            idx = rng.choice(len(pool), size=H, replace=replace)
            samples.append(TrainingSample(
                user_id=imp.user_id, positive=pos,
                negatives=[pool[i] for i in idx],
                history=list(imp.history), impression_id=imp.impression_id))
    return samples
