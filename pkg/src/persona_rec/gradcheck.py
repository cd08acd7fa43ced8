"""Finite-difference verification suite for the differentiable stack.

Covers every tensor primitive, both encoders, the click head, both loss
terms, and all five architecture variants end to end. Shapes are tiny so
the whole sweep finishes in seconds; everything runs in float64 because
float32 rounding would drown the comparison.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import autodiff as ad
from . import objectives as obj
from .autodiff import Tensor, grad_check
from .data import NewsItem
from .encoders import encode_news, encode_user, init_news_params, init_user_params
from .model import RecommenderModel
from .objectives import TrainingSample, init_click_params
from .text import TokenSequence, Vocabulary, make_sequence
from .training import VARIANTS, variant_flags

F64 = np.float64


def _leaf(rng, *shape, pos=False, kink_free=False) -> Tensor:
    x = rng.normal(0.0, 1.0, size=shape)
    if pos:
        x = np.abs(x) + 0.5
    if kink_free:
        # Finite differences straddle x=0 badly on piecewise-linear ops;
        # push values away from the kink.
        s = np.where(x >= 0, 1.0, -1.0)
        x = x + 0.35 * s
    return Tensor(np.asarray(x, dtype=F64), requires_grad=True)


def _functional(rng, shape):
    """Fixed random weighting so normalized outputs keep nonzero gradients."""
    w = ad.constant(rng.normal(size=shape).astype(F64))

    def apply(t: Tensor) -> Tensor:
        return ad.tsum(ad.mul(t, w))

    return apply


def primitive_checks(tol: float, seed: int) -> list:
    rng = np.random.default_rng(seed)
    reports = []

    def run(name, fn, *inputs):
        reports.append(grad_check(fn, list(inputs), tol=tol, name=name))

    a34, b34 = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    run("add", ad.add, a34, b34)
    run("add/broadcast", ad.add, _leaf(rng, 3, 4), _leaf(rng, 4))
    run("sub", ad.sub, a34, b34)
    run("mul", ad.mul, a34, b34)
    run("mul/broadcast", ad.mul, _leaf(rng, 3, 4), _leaf(rng, 4))
    run("neg", ad.neg, _leaf(rng, 3, 4))
    run("scale", lambda t: ad.scale(t, -1.7), _leaf(rng, 3, 4))
    run("leaky_relu", ad.leaky_relu, _leaf(rng, 3, 4, kink_free=True))
    run("tanh", ad.tanh, _leaf(rng, 3, 4))
    run("sigmoid", ad.sigmoid, _leaf(rng, 3, 4))
    run("softplus", ad.softplus, _leaf(rng, 3, 4))
    run("exp", ad.exp, _leaf(rng, 3, 4))
    run("log", ad.log, _leaf(rng, 3, 4, pos=True))
    run("matmul", ad.matmul, _leaf(rng, 3, 4), _leaf(rng, 4, 2))
    run("matmul/vec", ad.matmul, _leaf(rng, 4), _leaf(rng, 4, 2))
    run("dot", ad.dot, _leaf(rng, 5), _leaf(rng, 5))
    run("transpose", ad.transpose, _leaf(rng, 3, 4))

    w26 = _functional(rng, (2, 6))
    run("reshape", lambda t: w26(ad.reshape(t, (2, 6))), _leaf(rng, 3, 4))
    run("sum", ad.tsum, _leaf(rng, 3, 4))
    w4 = _functional(rng, (4,))
    run("get_row", lambda t: w4(ad.get_row(t, 1)), _leaf(rng, 3, 4))
    w34 = _functional(rng, (3, 4))
    run("stack_rows", lambda x, y, z: w34(ad.stack_rows([x, y, z])),
        _leaf(rng, 4), _leaf(rng, 4), _leaf(rng, 4))
    w3 = _functional(rng, (3,))
    run("stack_scalars",
        lambda x, y: w3(ad.stack_scalars([ad.dot(x, y), ad.dot(x, x), ad.dot(y, y)])),
        _leaf(rng, 4), _leaf(rng, 4))
    w35 = _functional(rng, (3, 5))
    run("concat_cols", lambda x, y: w35(ad.concat_cols([x, y])),
        _leaf(rng, 3, 2), _leaf(rng, 3, 3))
    w7 = _functional(rng, (7,))
    run("concat_vec", lambda x, y: w7(ad.concat_vec(x, y)),
        _leaf(rng, 3), _leaf(rng, 4))

    mask_rows = np.array([True, False, True])
    run("mask_rows", lambda t: w34(ad.mask_rows(t, mask_rows)), _leaf(rng, 3, 4))
    cols = np.array([True, True, False, True, True])
    run("softmax_masked", lambda t: w35(ad.softmax_masked(t, cols)), _leaf(rng, 3, 5))
    w5 = _functional(rng, (5,))
    run("softmax_masked/vec", lambda t: w5(ad.softmax_masked(t, cols)), _leaf(rng, 5))

    run("dropout",
        lambda t: w34(ad.dropout(t, 0.35, True, np.random.default_rng(7))),
        _leaf(rng, 3, 4))

    ids = np.array([0, 2, 5, 2])
    emask = np.array([True, True, True, False])
    w44 = _functional(rng, (4, 4))
    run("embedding_rows", lambda t: w44(ad.embedding_rows(t, ids, emask)),
        _leaf(rng, 6, 4))

    attn_mask = np.array([True, True, False, True])
    wq1, wk0, wk1, wv0, wv1 = (_leaf(rng, 6, 3) for _ in range(5))
    w46 = _functional(rng, (4, 6))
    run("multi_head_self_attention",
        lambda x, wq0, wo: w46(ad.multi_head_self_attention(
            x, [wq0, wq1], [wk0, wk1], [wv0, wv1], wo, attn_mask)),
        _leaf(rng, 4, 6), _leaf(rng, 6, 3), _leaf(rng, 6, 6))
    return reports


_WORDS = ("arbor brook cedar dune ember fjord grove heath inlet juniper "
          "knoll lagoon").split()


def _tiny_text(rng, n_w=4):
    vocab = Vocabulary()
    for w in _WORDS:
        vocab.add(w)

    def seq(k):
        words = [_WORDS[int(rng.integers(len(_WORDS)))] for _ in range(k)]
        return make_sequence(words, vocab, n_w)

    return vocab, seq


class _TinyBackend:
    """Float64 lookup table the checks can swap wholesale."""

    trainable = True

    def __init__(self, rng, vocab_size, d_w):
        self.d_w = d_w
        self.table = Tensor(rng.uniform(-0.5, 0.5, size=(vocab_size, d_w)),
                            requires_grad=True, dtype=F64)

    def parameters(self):
        return {"text.table": self.table}


@contextmanager
def _swapped(bindings, pts):
    """Temporarily rebind attribute groups to the check-point tensors."""
    olds = [[getattr(o, f) for o, f in group] for group in bindings]
    for group, p in zip(bindings, pts):
        for o, f in group:
            setattr(o, f, p)
    try:
        yield
    finally:
        for group, old_group in zip(bindings, olds):
            for (o, f), old in zip(group, old_group):
                setattr(o, f, old)


def encoder_checks(tol: float, seed: int) -> list:
    rng = np.random.default_rng(seed + 1)
    vocab, seq = _tiny_text(rng)
    backend = _TinyBackend(rng, len(vocab), d_w=5)
    news_p = init_news_params(rng, d_w=5, d_e=4, d_r=6, heads=2,
                              entity_table=_leaf(rng, 5, 4), dtype=F64)
    user_p = init_user_params(rng, d_e=4, d_r=6, heads=2, dtype=F64)
    pmask = np.array([True, True, False])
    reports = []

    text = seq(3)
    w6 = _functional(rng, (6,))

    def news_fn(persona_emb, table, dense1_w, wo, bilinear, pool_q):
        bindings = [[(backend, "table")], [(news_p, "dense1_w")],
                    [(news_p.mha, "wo")], [(news_p, "bilinear")],
                    [(news_p, "pool_q")]]
        with _swapped(bindings, (table, dense1_w, wo, bilinear, pool_q)):
            rep = encode_news(text, persona_emb, pmask, news_p, backend)
        return w6(rep.r)

    reports.append(grad_check(
        news_fn,
        [_leaf(rng, 3, 4), backend.table, news_p.dense1_w, news_p.mha.wo,
         news_p.bilinear, news_p.pool_q],
        tol=tol, name="news_encoder"))

    hist = [seq(3), seq(4), seq(2)]
    hmask = np.ones(3, dtype=bool)

    def user_fn(persona_emb, wo, score_we, score_q, pool_w):
        bindings = [[(user_p.mha, "wo")], [(user_p, "score_we")],
                    [(user_p, "score_q")], [(user_p, "pool_w")]]
        with _swapped(bindings, (wo, score_we, score_q, pool_w)):
            rep = encode_user(hist, hmask, persona_emb, pmask,
                              news_p, user_p, backend)
        return w6(rep.u)

    reports.append(grad_check(
        user_fn,
        [_leaf(rng, 3, 4), user_p.mha.wo, user_p.score_we, user_p.score_q,
         user_p.pool_w],
        tol=tol, name="user_encoder"))

    click = init_click_params(rng, d_r=6, d_c=6, dtype=F64)

    def click_fn(u, r, wu, q):
        with _swapped([[(click, "wu")], [(click, "q")]], (wu, q)):
            return obj.click_logit(u, r, click)

    reports.append(grad_check(
        click_fn, [_leaf(rng, 6), _leaf(rng, 6), click.wu, click.q],
        tol=tol, name="click_head"))
    return reports


def loss_checks(tol: float, seed: int) -> list:
    rng = np.random.default_rng(seed + 2)
    reports = [
        grad_check(lambda x: obj.sample_rec_loss(x, 0), [_leaf(rng, 5)],
                   tol=tol, name="rec_loss/sample"),
        grad_check(lambda a, b: obj.rec_loss([a, b]),
                   [_leaf(rng, 3), _leaf(rng, 3)], tol=tol, name="rec_loss/batch"),
    ]

    def cl_fn(a0, a1, a2, p0, p1, p2):
        batch = obj.ContrastiveBatch([a0, a1, a2], [p0, p1, p2])
        return obj.contrastive_loss(batch, tau=0.2)

    reports.append(grad_check(
        cl_fn, [_leaf(rng, 4) for _ in range(6)], tol=tol, name="contrastive_loss"))
    return reports


def _variant_world(rng, flags):
    vocab, seq = _tiny_text(rng)
    evocab = Vocabulary()
    for name in ("Q1", "Q2", "Q3"):
        evocab.add(name)
    store = {}
    for i in range(6):
        nid = f"N{i}"
        ents = ["Q1", "Q2", "Q3"][i % 3: i % 3 + 1 + i % 2]
        store[nid] = NewsItem(
            news_id=nid, title=seq(3), abstract=seq(4),
            entity_ids=[evocab.id_of(e) for e in ents],
            raw_title="", raw_abstract="", title_entities=ents)
    model = RecommenderModel(
        vocab, evocab, store, d_w=5, d_e=4, d_r=6, d_p=3, heads=2, n_w=4,
        n_u=3, n_e=3, top_k=2, top_g=3, dropout=0.0,
        rng=np.random.default_rng(rng.integers(1 << 30)), dtype=F64, **flags)
    return model


def _variant_loss(model):
    samples = [
        TrainingSample(user_id="u1", positive="N3", negatives=["N4", "N5"],
                       history=["N0", "N1", "N2"], impression_id="i1"),
        TrainingSample(user_id="u2", positive="N0", negatives=["N2"],
                       history=["N4", "N5"], impression_id="i2"),
    ]
    loss = obj.rec_loss([model.sample_logits(s) for s in samples])
    if model.use_cl:
        views = [model.user_views(s.user_id, s.history,
                                  np.random.default_rng(13), training=False)
                 for s in samples]
        batch = obj.ContrastiveBatch([v[0] for v in views], [v[1] for v in views])
        loss = obj.joint_loss(loss, obj.contrastive_loss(batch, tau=0.2), 1.0)
    return loss


def variant_checks(tol: float, seed: int) -> list:
    reports = []
    for name in VARIANTS:
        rng = np.random.default_rng(seed + 5)
        model = _variant_world(rng, variant_flags(name))

        bindings = [
            [(model, "entity_table"), (model.news_params, "entity_table")],
            [(model.news_params, "dense1_w")],
            [(model.user_params, "score_we")],
            [(model.click_params, "wu")],
        ]
        inputs = [model.entity_table, model.news_params.dense1_w,
                  model.user_params.score_we, model.click_params.wu]
        if model.use_cl:
            bindings.append([(model.cl_params, "w1")])
            inputs.append(model.cl_params.w1)
        if name in ("full", "no-cl+abstract"):
            bindings.append([(model.backend, "table")])
            inputs.append(model.backend.table)

        def fn(*pts, _bindings=bindings, _model=model):
            with _swapped(_bindings, pts):
                return _variant_loss(_model)

        reports.append(grad_check(fn, inputs, tol=tol, name=f"variant[{name}]"))
    return reports


def run_suite(tol: float = 1e-4, seed: int = 0) -> list:
    """Every check in one pass; reports carry per-check max relative error."""
    return (primitive_checks(tol, seed) + encoder_checks(tol, seed)
            + loss_checks(tol, seed) + variant_checks(tol, seed))
