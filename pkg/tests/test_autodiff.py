"""Tests for the reverse-mode autodiff engine and its verification harness."""

import math

import numpy as np
import pytest

import persona_rec.autodiff as ad
from persona_rec.autodiff import Adam, Tensor, grad_check
from persona_rec.errors import (
    CheckInapplicableError,
    ConfigurationError,
    DegenerateAttentionError,
    DimensionError,
    TrainingDivergenceError,
    VocabularyError,
)


def t64(data, requires_grad=True):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


class TestForwardValues:
    def test_matmul_identity(self):
        out = ad.matmul(t64([[1, 0], [0, 1]]), t64([[3], [4]]))
        assert np.array_equal(out.data, [[3], [4]])

    def test_matmul_zero(self):
        out = ad.matmul(t64([[1, 2], [3, 4]]), t64([[0], [0]]))
        assert np.array_equal(out.data, [[0], [0]])

    def test_matmul_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError) as ei:
            ad.matmul(t64(np.zeros((2, 3))), t64(np.zeros((4, 2))))
        assert "(2, 3)" in str(ei.value) and "(4, 2)" in str(ei.value)

    def test_leaky_relu_values(self):
        out = ad.leaky_relu(t64([2.0, -2.0]), slope=0.01)
        assert np.allclose(out.data, [2.0, -0.02])
        assert ad.leaky_relu(t64([0.0])).data[0] == 0.0

    def test_leaky_relu_subgradient_at_zero_is_slope(self):
        x = t64([0.0])
        y = ad.tsum(ad.leaky_relu(x, slope=0.3))
        y.backward()
        assert x.grad[0] == pytest.approx(0.3)

    def test_softmax_uniform_over_equal_logits(self):
        out = ad.softmax_masked(t64([2.5, 2.5, 2.5]), [True, True, True])
        assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-12)

    def test_softmax_single_survivor(self):
        out = ad.softmax_masked(t64([5.0, 5.0]), [True, False])
        assert out.data[0] == 1.0 and out.data[1] == 0.0

    def test_softmax_shift_invariance(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=7)
        mask = [True] * 5 + [False] * 2
        a = ad.softmax_masked(t64(z), mask).data
        b = ad.softmax_masked(t64(z + 10.0), mask).data
        assert np.allclose(a, b, atol=1e-9)

    def test_softmax_rows_sum_to_one_and_nonnegative(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            n = rng.integers(2, 12)
            mask = rng.random(n) < 0.7
            if not mask.any():
                mask[0] = True
            out = ad.softmax_masked(t64(rng.normal(size=(4, n)) * 5), mask).data
            assert np.all(out >= 0)
            assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-9)
            assert np.all(out[:, ~mask] == 0.0)

    def test_softmax_all_masked_raises(self):
        with pytest.raises(DegenerateAttentionError):
            ad.softmax_masked(t64([1.0, 2.0]), [False, False])

    def test_softmax_huge_masked_logit_does_not_overflow(self):
        out = ad.softmax_masked(t64([1.0, 1e9]), [True, False])
        assert out.data[0] == 1.0 and out.data[1] == 0.0


class TestGraphMechanics:
    def test_second_backward_raises(self):
        x = t64([1.0, 2.0])
        y = ad.tsum(ad.mul(x, x))
        y.backward()
        with pytest.raises(RuntimeError):
            y.backward()

    def test_no_grad_records_nothing(self):
        x = t64([1.0, 2.0])
        with ad.no_grad():
            y = ad.mul(x, x)
        assert y.requires_grad is False
        assert y._parents == ()

    def test_shared_parameter_accumulates(self):
        w = t64([[1.0, 2.0], [3.0, 4.0]])
        a = ad.matmul(t64([[1.0, 0.0]], requires_grad=False), w)
        b = ad.matmul(t64([[0.0, 1.0]], requires_grad=False), w)
        ad.tsum(ad.add(a, b)).backward()
        assert np.array_equal(w.grad, np.ones((2, 2)))

    def test_broadcast_add_unbroadcasts_gradient(self):
        x = t64(np.ones((3, 4)))
        b = t64(np.ones(4))
        ad.tsum(ad.add(x, b)).backward()
        assert np.array_equal(b.grad, 3 * np.ones(4))

    def test_embedding_rows_scatter_adds_duplicates(self):
        table = t64(np.arange(12.0).reshape(4, 3))
        out = ad.embedding_rows(table, [1, 1, 2], [True, True, True])
        ad.tsum(out).backward()
        assert np.array_equal(table.grad[1], [2.0, 2.0, 2.0])
        assert np.array_equal(table.grad[2], [1.0, 1.0, 1.0])
        assert np.array_equal(table.grad[0], [0.0, 0.0, 0.0])

    def test_embedding_rows_masked_rows_are_zero_and_get_no_grad(self):
        table = t64(np.ones((3, 2)))
        out = ad.embedding_rows(table, [2, 1], [True, False])
        assert np.array_equal(out.data[1], [0.0, 0.0])
        ad.tsum(out).backward()
        assert np.array_equal(table.grad[1], [0.0, 0.0])

    def test_embedding_rows_id_out_of_range(self):
        table = t64(np.ones((3, 2)))
        with pytest.raises(VocabularyError):
            ad.embedding_rows(table, [3], [True])

    def test_deep_chain_does_not_hit_recursion_limit(self):
        x = t64([1.0])
        y = x
        for _ in range(5000):
            y = ad.add(y, x)
        ad.tsum(y).backward()
        assert x.grad[0] == pytest.approx(5001.0)


class TestDropout:
    def test_rate_zero_identity(self):
        x = t64([1.0, 2.0])
        assert ad.dropout(x, 0.0, True, np.random.default_rng(0)) is x

    def test_eval_mode_identity(self):
        x = t64([1.0, 2.0])
        assert ad.dropout(x, 0.9, False, np.random.default_rng(0)) is x

    def test_mean_preserved_at_scale(self):
        x = Tensor(np.ones(10**6), requires_grad=False)
        out = ad.dropout(x, 0.2, True, np.random.default_rng(42))
        assert 0.995 <= float(out.data.mean()) <= 1.005

    def test_backward_reuses_forward_mask(self):
        x = t64(np.ones(64))
        out = ad.dropout(x, 0.5, True, np.random.default_rng(3))
        kept = out.data != 0
        ad.tsum(out).backward()
        assert np.array_equal(x.grad != 0, kept)
        assert np.allclose(x.grad[kept], 2.0)


def _mha_params(rng, d, heads, dtype=np.float64):
    d_h = d // heads
    mk = lambda *s: Tensor(rng.normal(size=s, scale=0.3).astype(dtype), requires_grad=True)
    wq = [mk(d, d_h) for _ in range(heads)]
    wk = [mk(d, d_h) for _ in range(heads)]
    wv = [mk(d, d_h) for _ in range(heads)]
    wo = mk(d, d)
    return wq, wk, wv, wo


class TestMultiHeadAttention:
    def test_single_row_equals_value_then_output_projection(self):
        rng = np.random.default_rng(5)
        wq, wk, wv, wo = _mha_params(rng, 8, 2)
        x = t64(rng.normal(size=(1, 8)))
        out = ad.multi_head_self_attention(x, wq, wk, wv, wo, [True])
        expected = np.concatenate([x.data @ wv[0].data, x.data @ wv[1].data], axis=1) @ wo.data
        assert np.allclose(out.data, expected, atol=1e-12)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(6)
        wq, wk, wv, wo = _mha_params(rng, 8, 2)
        x = rng.normal(size=(5, 8))
        mask = np.array([True, True, False, True, True])
        perm = rng.permutation(5)
        out = ad.multi_head_self_attention(t64(x), wq, wk, wv, wo, mask).data
        out_p = ad.multi_head_self_attention(t64(x[perm]), wq, wk, wv, wo, mask[perm]).data
        assert np.allclose(out_p, out[perm], atol=1e-9)

    def test_masked_rows_zeroed(self):
        rng = np.random.default_rng(7)
        wq, wk, wv, wo = _mha_params(rng, 4, 2)
        x = t64(rng.normal(size=(3, 4)))
        out = ad.multi_head_self_attention(x, wq, wk, wv, wo, [True, False, True])
        assert np.array_equal(out.data[1], np.zeros(4))

    def test_indivisible_heads_rejected(self):
        rng = np.random.default_rng(8)
        wq, wk, wv, wo = _mha_params(rng, 6, 2)
        with pytest.raises(ConfigurationError):
            ad.multi_head_self_attention(t64(np.zeros((2, 8))), wq, wk, wv, wo, [True, True])

    def test_gradient_wrt_input(self):
        rng = np.random.default_rng(9)
        wq, wk, wv, wo = _mha_params(rng, 8, 2)
        x = t64(rng.normal(size=(3, 8)))
        mask = [True, True, False]
        report = grad_check(
            lambda v: ad.multi_head_self_attention(v, wq, wk, wv, wo, mask),
            x, tol=1e-4, name="mha/x")
        assert report.passed, str(report)

    def test_gradient_wrt_every_projection(self):
        rng = np.random.default_rng(10)
        wq, wk, wv, wo = _mha_params(rng, 4, 2)
        x = Tensor(rng.normal(size=(3, 4)), dtype=np.float64)
        mask = [True, True, True]
        flat = list(wq) + list(wk) + list(wv) + [wo]

        def rebuild(*params):
            q, k, v = params[0:2], params[2:4], params[4:6]
            return ad.multi_head_self_attention(x, q, k, v, params[6], mask)

        report = grad_check(rebuild, flat, tol=1e-4, name="mha/params")
        assert report.passed, str(report)


# One entry per primitive: (name, builder) where builder(rng) returns
# (fn, inputs) for grad_check. Inputs are kept away from kinks/poles.
def _primitive_cases():
    def away_from_zero(rng, shape):
        x = rng.normal(size=shape)
        return x + np.sign(x) * 0.2

    cases = {
        "add": lambda rng: (ad.add, [t64(rng.normal(size=(3, 4))), t64(rng.normal(size=(3, 4)))]),
        "add_broadcast": lambda rng: (ad.add, [t64(rng.normal(size=(3, 4))), t64(rng.normal(size=4))]),
        "sub": lambda rng: (ad.sub, [t64(rng.normal(size=(2, 3))), t64(rng.normal(size=(2, 3)))]),
        "mul": lambda rng: (ad.mul, [t64(rng.normal(size=(3, 4))), t64(rng.normal(size=(3, 4)))]),
        "mul_broadcast": lambda rng: (ad.mul, [t64(rng.normal(size=(3, 1))), t64(rng.normal(size=(3, 4)))]),
        "neg": lambda rng: (ad.neg, [t64(rng.normal(size=5))]),
        "scale": lambda rng: (lambda x: ad.scale(x, -1.7), [t64(rng.normal(size=(2, 2)))]),
        "matmul_22": lambda rng: (ad.matmul, [t64(rng.normal(size=(3, 3))), t64(rng.normal(size=(3, 3)))]),
        "matmul_21": lambda rng: (ad.matmul, [t64(rng.normal(size=(3, 4))), t64(rng.normal(size=4))]),
        "matmul_12": lambda rng: (ad.matmul, [t64(rng.normal(size=3)), t64(rng.normal(size=(3, 4)))]),
        "dot": lambda rng: (ad.dot, [t64(rng.normal(size=5)), t64(rng.normal(size=5))]),
        "transpose": lambda rng: (ad.transpose, [t64(rng.normal(size=(2, 5)))]),
        "reshape": lambda rng: (lambda x: ad.reshape(x, (6,)), [t64(rng.normal(size=(2, 3)))]),
        "leaky_relu": lambda rng: (ad.leaky_relu, [t64(away_from_zero(rng, (3, 3)))]),
        "tanh": lambda rng: (ad.tanh, [t64(rng.normal(size=(2, 4)))]),
        "sigmoid": lambda rng: (ad.sigmoid, [t64(rng.normal(size=6) * 2)]),
        "softplus": lambda rng: (ad.softplus, [t64(rng.normal(size=6) * 2)]),
        "exp": lambda rng: (ad.exp, [t64(rng.normal(size=5))]),
        "log": lambda rng: (ad.log, [t64(rng.random(5) + 0.5)]),
        "sum": lambda rng: (ad.tsum, [t64(rng.normal(size=(3, 3)))]),
        "get_row": lambda rng: (lambda x: ad.get_row(x, 1), [t64(rng.normal(size=(3, 4)))]),
        "stack_rows": lambda rng: (lambda a, b: ad.stack_rows([a, b]),
                                   [t64(rng.normal(size=4)), t64(rng.normal(size=4))]),
        "stack_scalars": lambda rng: (lambda a, b: ad.stack_scalars([a, b]),
                                      [t64(rng.normal()), t64(rng.normal())]),
        "concat_cols": lambda rng: (lambda a, b: ad.concat_cols([a, b]),
                                    [t64(rng.normal(size=(3, 2))), t64(rng.normal(size=(3, 4)))]),
        "concat_vec": lambda rng: (ad.concat_vec, [t64(rng.normal(size=3)), t64(rng.normal(size=2))]),
        "softmax_masked": lambda rng: (
            lambda x: ad.softmax_masked(x, [True, False, True, True, False]),
            [t64(rng.normal(size=5) * 3)]),
        "softmax_masked_2d": lambda rng: (
            lambda x: ad.softmax_masked(x, [True, True, False, True]),
            [t64(rng.normal(size=(3, 4)) * 3)]),
        "dropout": lambda rng: (
            lambda x: ad.dropout(x, 0.3, True, np.random.default_rng(11)),
            [t64(rng.normal(size=(4, 4)))]),
        "mask_rows": lambda rng: (lambda x: ad.mask_rows(x, [True, False, True]),
                                  [t64(rng.normal(size=(3, 4)))]),
        "embedding_rows": lambda rng: (
            lambda tbl: ad.embedding_rows(tbl, [0, 2, 2, 4], [True, True, True, False]),
            [t64(rng.normal(size=(5, 3)))]),
    }
    return sorted(cases.items())


@pytest.mark.parametrize("name,builder", _primitive_cases())
def test_primitive_gradients_at_ten_random_points(name, builder):
    for seed in range(10):
        rng = np.random.default_rng(1000 + seed)
        fn, inputs = builder(rng)
        report = grad_check(fn, inputs, tol=1e-4, name=f"{name}@{seed}")
        assert report.passed, str(report)


class TestGradCheckHarness:
    def test_linear_op_near_exact(self):
        rng = np.random.default_rng(12)
        b = Tensor(rng.normal(size=(3, 3)), dtype=np.float64)
        report = grad_check(lambda a: ad.matmul(a, b),
                            t64(rng.normal(size=(3, 3))), tol=1e-9, name="linear")
        assert report.passed, str(report)
        assert report.max_rel_err < 1e-9

    def test_corrupted_backward_fails(self):
        def corrupted_tanh(x):
            out = ad.tanh(x)
            orig = out._backward_fn
            out._backward_fn = lambda g: orig(g * 1.01)
            return out

        report = grad_check(corrupted_tanh, t64([0.3, -0.7, 1.2]), tol=1e-4, name="corrupted")
        assert not report.passed

    def test_non_finite_output_inapplicable(self):
        with pytest.raises(CheckInapplicableError):
            grad_check(ad.log, t64([-1.0]), tol=1e-4, name="log-neg")

    def test_report_is_printable(self):
        report = grad_check(ad.tanh, t64([0.5]), tol=1e-4, name="tanh")
        assert "tanh" in str(report) and "rel err" in str(report)


class TestAdam:
    def test_zero_gradient_leaves_params_unchanged(self):
        p = Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
        opt = Adam({"p": p}, lr=0.1)
        p.grad = np.zeros_like(p.data)
        opt.step()
        assert np.array_equal(p.data, np.array([1.0, -2.0], dtype=np.float32))
        assert opt.t == 1

    def test_first_step_is_minus_lr_for_unit_gradient(self):
        lr = 8e-5
        p = Tensor(np.zeros(1, dtype=np.float64), requires_grad=True)
        opt = Adam({"p": p}, lr=lr)
        p.grad = np.ones(1)
        opt.step()
        assert p.data[0] == pytest.approx(-lr, rel=1e-6)

    def test_hundred_steps_bit_identical_across_runs(self):
        def run():
            rng = np.random.default_rng(13)
            p = Tensor(rng.normal(size=8).astype(np.float32), requires_grad=True)
            opt = Adam({"p": p}, lr=1e-3)
            for _ in range(100):
                p.grad = rng.normal(size=8).astype(np.float32)
                opt.step()
            return p.data.copy()

        assert np.array_equal(run(), run())

    def test_nan_gradient_raises_divergence(self):
        p = Tensor(np.zeros(2, dtype=np.float32), requires_grad=True)
        opt = Adam({"p": p})
        p.grad = np.array([1.0, np.nan], dtype=np.float32)
        with pytest.raises(TrainingDivergenceError):
            opt.step()

    def test_skips_params_without_grads(self):
        p = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        q = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        opt = Adam({"p": p, "q": q}, lr=0.5)
        p.grad = np.ones(2, dtype=np.float32)
        opt.step()
        assert np.array_equal(q.data, np.ones(2, dtype=np.float32))
        assert not np.array_equal(p.data, np.ones(2, dtype=np.float32))

    def test_zero_grad_clears_all(self):
        p = Tensor(np.ones(2), requires_grad=True)
        opt = Adam({"p": p})
        p.grad = np.ones(2)
        opt.zero_grad()
        assert p.grad is None
