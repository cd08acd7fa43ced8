"""Training loop: joint ranking + cross-view optimization with Adam.

Determinism contract: every random choice flows from named generators
spawned off the config seed (init, negative sampling, batch order, dropout
and view construction), so identical (config, data, seed) reproduce logs
and checkpoints bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime

import numpy as np

from . import objectives as obj
from .autodiff import Adam
from .data import make_training_samples
from .errors import ConfigurationError, DataError, TrainingDivergenceError
from .evaluation import evaluate
from .model import RecommenderModel

VARIANTS = ("full", "no-persona", "no-cl", "no-both", "no-cl+abstract")


@dataclass
class TrainConfig:
    """All knobs of a run. Defaults follow the reference setting."""

    batch_size: int = 64
    H: int = 4                  # negatives sampled per clicked item
    lr: float = 8e-5
    dropout: float = 0.2
    lam: float = 1.0            # weight of the contrastive term
    tau: float = 0.05
    top_k: int = 4              # entities kept per news item
    top_g: int = 20             # recent reads scanned for the persona
    n_e: int = 0                # persona capacity; 0 means top_k * top_g
    n_w: int = 20               # title length in tokens
    n_u: int = 20               # history length in items
    d_w: int = 64
    d_e: int = 64
    d_r: int = 256
    d_p: int = 128
    heads: int = 8
    epochs: int = 5
    seed: int = 0
    use_persona: bool = True
    use_cl: bool = True
    abstract_as_title: bool = False
    rho_cl: float = 0.2         # per-item drop rate building the title view
    dev_fraction: float = 0.1

    def validate(self):
        positive = ("batch_size", "H", "top_k", "top_g", "n_w", "n_u",
                    "d_w", "d_e", "d_r", "d_p", "heads", "epochs")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_e < 0:
            raise ConfigurationError(f"n_e must be >= 0 (0 = top_k*top_g), got {self.n_e}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")
        if not 0.0 <= self.rho_cl < 1.0:
            raise ConfigurationError(f"rho_cl must be in [0, 1), got {self.rho_cl}")
        if not 0.0 <= self.dev_fraction < 1.0:
            raise ConfigurationError(
                f"dev_fraction must be in [0, 1), got {self.dev_fraction}")
        if self.lam < 0:
            raise ConfigurationError(f"lam must be >= 0, got {self.lam}")
        if self.tau <= 0:
            raise ConfigurationError(f"tau must be > 0, got {self.tau}")
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be > 0, got {self.lr}")
        if self.d_r % self.heads:
            raise ConfigurationError(
                f"d_r={self.d_r} must be divisible by heads={self.heads}")


def variant_flags(name: str) -> dict:
    """Map an ablation name to its flag settings."""
    table = {
        "full": dict(use_persona=True, use_cl=True, abstract_as_title=False),
        "no-persona": dict(use_persona=False, use_cl=True, abstract_as_title=False),
        "no-cl": dict(use_persona=True, use_cl=False, abstract_as_title=False),
        "no-both": dict(use_persona=False, use_cl=False, abstract_as_title=False),
        "no-cl+abstract": dict(use_persona=True, use_cl=False, abstract_as_title=True),
    }
    key = name.lower()
    if key not in table:
        raise ConfigurationError(f"unknown variant {name!r}; choose one of {VARIANTS}")
    return table[key]


def apply_variant(cfg: TrainConfig) -> TrainConfig:
    """Validate flags and resolve derived fields; returns the effective config."""
    cfg.validate()
    if cfg.abstract_as_title and cfg.use_cl:
        raise ConfigurationError(
            "abstract_as_title requires use_cl=false: folding abstracts into the "
            "ranking input leaves no second view for the contrastive objective")
    n_e = cfg.n_e if cfg.n_e else cfg.top_k * cfg.top_g
    return replace(cfg, n_e=n_e)


def build_model(cfg: TrainConfig, vocab, entity_vocab, news_store,
                rng=None, dtype=np.float32) -> RecommenderModel:
    cfg = apply_variant(cfg)
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    return RecommenderModel(
        vocab, entity_vocab, news_store,
        d_w=cfg.d_w, d_e=cfg.d_e, d_r=cfg.d_r, d_p=cfg.d_p, heads=cfg.heads,
        n_w=cfg.n_w, n_u=cfg.n_u, n_e=cfg.n_e, top_k=cfg.top_k, top_g=cfg.top_g,
        dropout=cfg.dropout, rng=rng, use_persona=cfg.use_persona,
        use_cl=cfg.use_cl, abstract_as_title=cfg.abstract_as_title,
        rho_cl=cfg.rho_cl, dtype=dtype)


def split_by_time(impressions, dev_fraction: float):
    """Hold out the newest fraction of impressions as the dev split."""
    ordered = sorted(impressions, key=lambda i: i.when or datetime.min)
    n = len(ordered)
    n_dev = max(1, int(n * dev_fraction)) if n > 1 and dev_fraction > 0 else 0
    if n_dev == 0:
        return list(ordered), []
    return ordered[:-n_dev], ordered[-n_dev:]


def train_step(model: RecommenderModel, batch, opt: Adam, lam: float, tau: float,
               drop_rng) -> tuple:
    """One optimization step on a batch of samples; returns loss components.

    The contrastive term reuses the batch's users (first occurrence of each);
    it is skipped when fewer than two of them yield both views.
    """
    logit_vectors = [model.sample_logits(sample, training=True, rng=drop_rng)
                     for sample in batch]
    rec = obj.rec_loss(logit_vectors)

    cl = None
    if model.use_cl and lam > 0:
        anchors, positives = [], []
        seen = set()
        for sample in batch:
            if sample.user_id in seen:
                continue
            seen.add(sample.user_id)
            views = model.user_views(sample.user_id, sample.history,
                                     rng=drop_rng, training=True)
            if views is not None:
                anchors.append(views[0])
                positives.append(views[1])
        if len(anchors) >= 2:
            cl = obj.contrastive_loss(obj.ContrastiveBatch(anchors, positives), tau)

    loss = obj.joint_loss(rec, cl, lam)
    rec_v = float(rec.data)
    cl_v = float(cl.data) if cl is not None else None
    loss.backward()
    opt.step()
    opt.zero_grad()
    return rec_v, cl_v


def _check_finite(rec_v, cl_v, epoch: int, step: int):
    parts = []
    if not np.isfinite(rec_v):
        parts.append(f"ranking loss = {rec_v}")
    if cl_v is not None and not np.isfinite(cl_v):
        parts.append(f"contrastive loss = {cl_v}")
    if parts:
        raise TrainingDivergenceError(
            f"non-finite loss at epoch {epoch}, step {step}: " + "; ".join(parts))


@dataclass
class TrainResult:
    model: RecommenderModel
    config: TrainConfig
    records: list                    # one dict per epoch
    n_train_samples: int
    n_dev: int
    n_dev_skipped: int               # dev impressions with no history

    def log_lines(self) -> list:
        return [json.dumps(r, sort_keys=True) for r in self.records]


def train(cfg: TrainConfig, vocab, entity_vocab, news_store, impressions,
          eval_ks=(5, 10), progress=None) -> TrainResult:
    """Run the full optimization and per-epoch dev evaluation."""
    cfg = apply_variant(cfg)
    ss = np.random.SeedSequence(cfg.seed)
    init_rng, sample_rng, order_rng, drop_rng = (
        np.random.default_rng(s) for s in ss.spawn(4))

    model = build_model(cfg, vocab, entity_vocab, news_store, rng=init_rng)
    opt = Adam(model.named_parameters(), lr=cfg.lr)

    train_imps, dev_imps = split_by_time(impressions, cfg.dev_fraction)
    samples = make_training_samples(train_imps, cfg.H, sample_rng)
    if not samples:
        raise DataError("no usable training samples (every impression was "
                        "cold-start or had no negatives)")
    scoreable_dev = [i for i in dev_imps if i.history]

    records = []
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(len(samples))
        rec_sum = 0.0
        cl_sum = 0.0
        cl_batches = 0
        for step, start in enumerate(range(0, len(samples), cfg.batch_size)):
            batch = [samples[i] for i in order[start : start + cfg.batch_size]]
            rec_v, cl_v = train_step(model, batch, opt, cfg.lam, cfg.tau, drop_rng)
            _check_finite(rec_v, cl_v, epoch, step)
            rec_sum += rec_v * len(batch)
            if cl_v is not None:
                cl_sum += cl_v
                cl_batches += 1

        rec_mean = rec_sum / len(samples)
        cl_mean = cl_sum / cl_batches if cl_batches else 0.0
        record = {
            "epoch": epoch,
            "rec_loss": rec_mean,
            "cl_loss": cl_mean,
            "joint_loss": rec_mean + cfg.lam * cl_mean,
        }
        if scoreable_dev:
            report = evaluate(model, scoreable_dev, ks=eval_ks)
            record["dev_auc"] = report.values["auc"]
            record["dev_mrr"] = report.values["mrr"]
            for k in eval_ks:
                record[f"dev_ndcg@{k}"] = report.values[f"ndcg@{k}"]
        records.append(record)
        if progress is not None:
            progress(record)

    return TrainResult(model=model, config=cfg, records=records,
                       n_train_samples=len(samples), n_dev=len(dev_imps),
                       n_dev_skipped=len(dev_imps) - len(scoreable_dev))


def config_as_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
