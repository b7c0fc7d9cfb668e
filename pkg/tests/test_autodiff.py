import math

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from smap import autodiff as ad
from smap import gradcheck

from conftest import f64


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = torch.zeros(m, n, dtype=torch.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for r in range(k):
                acc += a[i, r].item() * b[r, j].item()
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        b = f64(3, 5)
        assert torch.equal(ad.matmul(torch.eye(3, dtype=torch.float64), b), b)

    def test_zeros(self):
        assert torch.equal(ad.matmul(torch.zeros(2, 3, dtype=torch.float64), f64(3, 4)), torch.zeros(2, 4, dtype=torch.float64))

    @pytest.mark.parametrize("seed", range(5))
    def test_against_triple_loop(self, seed):
        a, b = f64(3, 3, seed=seed), f64(3, 3, seed=seed + 100)
        assert (ad.matmul(a, b) - triple_loop(a, b)).abs().max() < 1e-12

    def test_inner_dim_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.matmul(f64(2, 3), f64(4, 2))


class TestSoftmax:
    def test_constant_is_uniform(self):
        out = ad.softmax(torch.full((5,), 3.0, dtype=torch.float64), -1)
        assert torch.allclose(out, torch.full((5,), 0.2, dtype=torch.float64), atol=0, rtol=1e-15)

    @given(st.floats(-50, 50))
    def test_shift_invariance(self, c):
        x = f64(3, 6)
        assert (ad.softmax(x + c, -1) - ad.softmax(x, -1)).abs().max() < 1e-12

    def test_direct_evaluation(self):
        x = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)
        e = [math.exp(v) for v in (1.0, 2.0, 3.0)]
        ref = torch.tensor([v / sum(e) for v in e], dtype=torch.float64)
        assert (ad.softmax(x, -1) - ref).abs().max() < 1e-15


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        out = ad.layer_norm(torch.full((1, 4), 7.0, dtype=torch.float64))
        assert torch.equal(out, torch.zeros(1, 4, dtype=torch.float64))

    def test_two_entry_row(self):
        out = ad.layer_norm(torch.tensor([[1.0, 3.0]], dtype=torch.float64), eps=1e-6)
        # mean 2, var 1: (x - 2) / sqrt(1 + eps)
        expected = torch.tensor([[-1.0, 1.0]], dtype=torch.float64) / math.sqrt(1 + 1e-6)
        assert (out - expected).abs().max() < 1e-15

    @pytest.mark.parametrize("seed", range(5))
    def test_moments(self, seed):
        x = f64(6, 16, seed=seed) * 3 + 1
        gain, bias = f64(16, seed=seed + 1), f64(16, seed=seed + 2)
        out = ad.layer_norm(x, gain, bias)
        n = (out - bias) / gain
        assert n.mean(-1).abs().max() < 1e-6
        assert (n.var(-1, unbiased=False) - 1).abs().max() < 1e-6

    def test_affine_shape_checked(self):
        with pytest.raises(ad.ShapeError):
            ad.layer_norm(f64(2, 4), f64(3), f64(3))


class TestBackward:
    def test_sum_grad_is_ones(self):
        x = f64(3, 2).requires_grad_(True)
        ad.backward(x.sum())
        assert torch.equal(x.grad, torch.ones_like(x))

    def test_square_grad(self):
        x = f64(4).requires_grad_(True)
        ad.backward((x * x).sum())
        assert torch.allclose(x.grad, 2 * x.detach(), rtol=0, atol=0)

    def test_twice_is_an_error(self):
        x = f64(3).requires_grad_(True)
        loss = (x * x).sum()
        ad.backward(loss)
        with pytest.raises(RuntimeError):
            ad.backward(loss)

    def test_non_scalar_rejected(self):
        x = f64(3).requires_grad_(True)
        with pytest.raises(ValueError):
            ad.backward(x * 2)

    def test_composite_two_point_stencil(self):
        # every primitive in one expression, checked with plain central differences at h=1e-5
        b, g, bias, table = f64(4, 4, seed=1), f64(4, seed=2), f64(4, seed=3), f64(3, 4, seed=4)
        ids = torch.tensor([0, 2, 1])

        def f(x):
            h = ad.matmul(x, b)
            h = ad.add(ad.layer_norm(h, g, bias), ad.embedding(ids, table))
            h = ad.mul(ad.gelu(h), ad.softmax(h, -1))
            h = ad.slice_seq(ad.concat([h, x], axis=0), 1, 4, axis=0)
            return ad.mse(h, torch.zeros_like(h))

        rep = ad.finite_diff_check(f, f64(3, 4, seed=5), h=1e-5)
        assert rep.passed, rep


class TestFiniteDiff:
    def test_half_squared_norm(self):
        rep = ad.finite_diff_check(lambda x: 0.5 * (x * x).sum(), f64(5))
        assert rep.max_rel_error < 1e-9

    def test_softmax_cross_entropy(self):
        f, x = gradcheck.check_softmax_xent(0)
        assert ad.finite_diff_check(f, x).max_rel_error < 1e-4

    def test_dead_coordinate_reported(self):
        rep = ad.finite_diff_check(lambda x: (x[1:] ** 2).sum(), f64(3))
        assert rep.dead_coordinates == [0]
        assert rep.passed

    def test_wrong_gradient_fails(self):
        class Bad(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                return x * x

            @staticmethod
            def backward(ctx, g):
                return g  # should be 2x

        rep = ad.finite_diff_check(lambda x: Bad.apply(x).sum(), f64(4) + 3)
        assert not rep.passed

    def test_fourth_order_stencil_is_exact_on_quartics(self):
        f = lambda x: (x.pow(4) - 2 * x.pow(3) + x).sum()
        x = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64)
        four = ad.finite_diff_check(f, x, h=1e-2, stencil=4)
        two = ad.finite_diff_check(f, x, h=1e-2, stencil=2)
        assert four.max_rel_error < 1e-10 < two.max_rel_error

    def test_bad_stencil(self):
        with pytest.raises(ValueError):
            ad.finite_diff_check(lambda x: x.sum(), f64(2), stencil=3)


class TestShapeContracts:
    def test_concat_then_slice_is_identity(self):
        parts = [f64(2, 3, seed=1), f64(4, 3, seed=2), f64(1, 3, seed=3)]
        joined = ad.concat(parts, axis=0)
        start = 0
        for p in parts:
            assert torch.equal(ad.slice_seq(joined, start, start + p.shape[0], axis=0), p)
            start += p.shape[0]

    def test_no_broadcasting_in_elementwise_ops(self):
        with pytest.raises(ad.ShapeError):
            ad.add(f64(2, 3), f64(3))
        with pytest.raises(ad.ShapeError):
            ad.mul(f64(2, 3), f64(1, 3))

    def test_embedding_range(self):
        with pytest.raises(IndexError):
            ad.embedding(torch.tensor([3]), f64(3, 2))

    def test_forward_is_deterministic(self):
        x = f64(8, 16)
        a = ad.softmax(ad.matmul(x, x.T), -1)
        b = ad.softmax(ad.matmul(x, x.T), -1)
        assert torch.equal(a, b)


@pytest.mark.parametrize("name", list(gradcheck.CHECKS))
def test_suite_check_passes_on_a_few_seeds(name):
    # the full 100-seed run lives in the acceptance suite
    assert gradcheck.run_check(name, seeds=3).passed
