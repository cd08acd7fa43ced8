"""Synthetic corpus with a planted interest structure.

Each user gets a small latent set of interest entities; each news item
carries 1 to 4 entities and topic words tied to them. Candidates are
clicked with high probability exactly when the item shares an entity with
the user's interests, so the latent overlap rule is a near-perfect scorer
and a learnable signal at desk scale. Output is standard news/behaviors
TSV plus a ground-truth file of the latent interests.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timedelta

import numpy as np

from .data import Impression, NewsItem, write_behaviors_file, write_news_file
from .evaluation import ScoredImpression, aggregate

_TIME0 = datetime(2019, 11, 11, 7, 0, 0)

P_CLICK_OVERLAP = 0.98
P_CLICK_NO_OVERLAP = 0.005
WORDS_PER_ENTITY = 3
NOISE_WORDS = 8


@dataclass
class SynthCorpus:
    news: list                      # NewsItem rows (raw fields only)
    impressions: list               # Impression rows
    interests: dict                 # user id -> sorted list of entity names
    entities_of: dict               # news id -> set of entity names


def _entity_words(k: int) -> list:
    return [f"topic{k}word{j}" for j in range(WORDS_PER_ENTITY)]


def _time_str(minutes: int) -> str:
    t = _TIME0 + timedelta(minutes=minutes)
    return t.strftime("%m/%d/%Y %I:%M:%S %p")


def generate_corpus(n_users: int, n_news: int, n_entities: int, seed: int,
                    p_click_overlap: float = P_CLICK_OVERLAP,
                    p_click_no_overlap: float = P_CLICK_NO_OVERLAP,
                    impressions_per_user: int = 3) -> SynthCorpus:
    rng = np.random.default_rng(seed)
    entities = [f"Q{k + 1}" for k in range(n_entities)]
    noise = [f"noise{j}" for j in range(NOISE_WORDS)]

    news = []
    entities_of = {}
    for i in range(n_news):
        nid = f"S{i:04d}"
        chosen = sorted(rng.choice(n_entities, size=1, replace=False).tolist())
        names = [entities[k] for k in chosen]
        # Titles carry one topic word per entity plus noise; abstracts carry
        # the full topic vocabulary of each entity, a richer view.
        title_words = [_entity_words(k)[int(rng.integers(WORDS_PER_ENTITY))]
                       for k in chosen]
        title_words += [noise[int(rng.integers(NOISE_WORDS))]]
        abstract_words = [w for k in chosen for w in _entity_words(k)]
        abstract_words += [noise[int(rng.integers(NOISE_WORDS))] for _ in range(2)]
        news.append(NewsItem(
            news_id=nid, title=None, abstract=None, entity_ids=[],
            raw_title=" ".join(title_words),
            raw_abstract=" ".join(abstract_words),
            category="synthetic", subcategory="planted", url="",
            title_entities=names, abstract_entities=[]))
        entities_of[nid] = set(names)

    interests = {}
    impressions = []
    imp_no = 0
    seen_sets: set = set()
    for u in range(n_users):
        uid = f"U{u + 1:03d}"
        attempts = 0
        while True:
            attempts += 1
            size = int(rng.integers(2, 4))
            mine = set(entities[k] for k in
                       rng.choice(n_entities, size=size, replace=False))
            overlapping = [n.news_id for n in news
                           if entities_of[n.news_id] & mine]
            disjoint = [n.news_id for n in news
                        if not (entities_of[n.news_id] & mine)]
            if len(overlapping) < 4 or len(disjoint) < 4:
                # Degenerate draw for a tiny corpus; redraw entities.
                continue
            # Duplicate interest sets make two users behaviorally identical,
            # which blurs the planted signal; prefer fresh sets while any
            # remain (bounded so tiny entity pools still terminate).
            if frozenset(mine) in seen_sets and attempts < 64:
                continue
            break
        seen_sets.add(frozenset(mine))
        interests[uid] = sorted(mine)

        history = [overlapping[i] for i in
                   rng.choice(len(overlapping), size=min(4, len(overlapping)),
                              replace=False)]
        for j in range(impressions_per_user):
            n_over = int(rng.integers(2, 4))
            n_dis = int(rng.integers(2, 4))
            cands = [overlapping[i] for i in
                     rng.choice(len(overlapping), size=n_over, replace=False)]
            cands += [disjoint[i] for i in
                      rng.choice(len(disjoint), size=n_dis, replace=False)]
            labels = []
            for nid in cands:
                p = p_click_overlap if entities_of[nid] & mine else p_click_no_overlap
                labels.append(1 if rng.random() < p else 0)
            # Keep every impression two-class without breaking the rule:
            # force one overlapping candidate positive / one disjoint negative.
            if 1 not in labels:
                labels[0] = 1
            if 0 not in labels:
                labels[n_over] = 0
            order = rng.permutation(len(cands))
            pairs = [(cands[i], labels[i]) for i in order]
            imp_no += 1
            # Sessions interleave across users in time, the way a real log
            # does: a time-based holdout then keeps every user in training.
            impressions.append(Impression(
                impression_id=str(imp_no), user_id=uid,
                time_str=_time_str(j * n_users + u), history=list(history),
                candidates=pairs))
            history = history + [nid for nid, lab in pairs if lab == 1]

    return SynthCorpus(news=news, impressions=impressions,
                       interests=interests, entities_of=entities_of)


def write_corpus(corpus: SynthCorpus, out_dir) -> dict:
    """Write news.tsv, behaviors.tsv, and ground_truth.tsv; returns paths."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "news": os.path.join(out_dir, "news.tsv"),
        "behaviors": os.path.join(out_dir, "behaviors.tsv"),
        "ground_truth": os.path.join(out_dir, "ground_truth.tsv"),
    }
    write_news_file(paths["news"], corpus.news)
    write_behaviors_file(paths["behaviors"], corpus.impressions)
    with open(paths["ground_truth"], "w", encoding="utf-8") as f:
        for uid in sorted(corpus.interests):
            f.write(f"{uid}\t{','.join(corpus.interests[uid])}\n")
    return paths


def rule_scores(corpus: SynthCorpus, imp: Impression) -> np.ndarray:
    """The latent rule as a scorer: entity-overlap count with the user."""
    mine = set(corpus.interests[imp.user_id])
    return np.array([len(corpus.entities_of[nid] & mine)
                     for nid, _ in imp.candidates], dtype=np.float64)


def rule_report(corpus: SynthCorpus):
    """Evaluate the latent rule on the corpus's own impressions."""
    scored = [ScoredImpression(imp.impression_id, rule_scores(corpus, imp),
                               np.array([lab for _, lab in imp.candidates]))
              for imp in corpus.impressions]
    return aggregate(scored)
