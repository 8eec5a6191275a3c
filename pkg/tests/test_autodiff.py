import numpy as np
import pytest

from laifusion import autodiff as ad
from laifusion.autodiff import Tensor
from laifusion.errors import ContractViolation, InvalidGeometry, NumericalError
from laifusion.gradcheck import EPS, _op_cases
from laifusion.lossmetrics import masked_mse


def conv_oracle(x, w, b, stride, pad):
    """Direct nested-loop cross-correlation."""
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for a in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = b[o]
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[a, ci, i * stride + u, j * stride + v] * w[o, ci, u, v]
                    out[a, o, i, j] = acc
    return out


class TestConv2d:
    def test_two_by_two_example(self):
        x = Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
        w = Tensor([[[[1.0, 0.0], [0.0, 1.0]]]])
        out = ad.conv2d(x, w, Tensor([0.0]))
        np.testing.assert_array_equal(out.data, [[[[5.0]]]])

    @pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 2), (1, 0, 1)])
    def test_matches_loop_oracle(self, rng, stride, pad, k):
        x = rng.standard_normal((2, 3, 6, 7))
        w = rng.standard_normal((4, 3, k, k))
        b = rng.standard_normal(4)
        out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad)
        np.testing.assert_allclose(out.data, conv_oracle(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)

    def test_delta_kernel_is_exact_identity(self, rng):
        x = rng.standard_normal((2, 1, 5, 5)).astype(np.float32)
        out = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1), np.float32)), Tensor(np.zeros(1, np.float32)))
        assert np.array_equal(out.data, x)

    def test_zero_input_gives_bias(self, rng):
        out = ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(rng.standard_normal((1, 2, 3, 3))), Tensor([2.5]))
        assert np.all(out.data == 2.5)

    def test_channel_mismatch(self):
        with pytest.raises(ContractViolation):
            ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), Tensor([0.0]))

    def test_kernel_larger_than_input(self):
        with pytest.raises(InvalidGeometry):
            ad.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))), Tensor([0.0]))


class TestPoolUpsample:
    def test_max_pool_example(self):
        out = ad.max_pool2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), 2)
        np.testing.assert_array_equal(out.data, [[[[4.0]]]])

    def test_constant_field(self):
        out = ad.max_pool2d(Tensor(np.full((1, 2, 6, 6), 3.0)), 3)
        assert out.shape == (1, 2, 2, 2) and np.all(out.data == 3.0)

    def test_tie_routes_to_first_occurrence(self):
        x = Tensor([[[[5.0, 5.0], [1.0, 2.0]]]], requires_grad=True)
        ad.max_pool2d(x, 2).sum().backward()
        np.testing.assert_array_equal(x.grad, [[[[1.0, 0.0], [0.0, 0.0]]]])

    def test_indivisible(self):
        with pytest.raises(InvalidGeometry):
            ad.max_pool2d(Tensor(np.zeros((1, 1, 5, 4))), 2)

    def test_upsample_single(self):
        np.testing.assert_array_equal(ad.upsample_nearest2x(Tensor([[[[1.0]]]])).data, np.ones((1, 1, 2, 2)))

    def test_upsample_block_replication(self):
        out = ad.upsample_nearest2x(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]))
        expected = [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
        np.testing.assert_array_equal(out.data[0, 0], expected)

    def test_upsample_backward_sums_blocks(self):
        x = Tensor(np.zeros((1, 1, 2, 3)), requires_grad=True)
        ad.upsample_nearest2x(x).sum().backward()
        assert np.all(x.grad == 4.0)


class TestElementwiseOps:
    def test_relu(self):
        np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
        x = np.array([0.5, 3.0])
        np.testing.assert_array_equal(ad.relu(Tensor(x)).data, x)

    def test_relu_subgradient_at_zero(self):
        x = Tensor([0.0, 1.0, -1.0], requires_grad=True)
        ad.relu(x).sum().backward()
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])

    def test_linear(self):
        out = ad.linear(Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0]]), Tensor([1.0]))
        np.testing.assert_array_equal(out.data, [[12.0]])

    def test_linear_identity_and_zero(self, rng):
        x = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(ad.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)
        b = rng.standard_normal(2)
        np.testing.assert_array_equal(ad.linear(Tensor(np.zeros((3, 4))), Tensor(np.ones((2, 4))), Tensor(b)).data,
                                      np.tile(b, (3, 1)))

    def test_linear_mismatch(self):
        with pytest.raises(ContractViolation):
            ad.linear(Tensor(np.zeros((1, 3))), Tensor(np.zeros((2, 4))), Tensor(np.zeros(2)))

    def test_concat(self, rng):
        a, b = rng.standard_normal((2, 1, 3, 3)), rng.standard_normal((2, 1, 3, 3))
        np.testing.assert_array_equal(ad.concat_channels([Tensor(a)]).data, a)
        out = ad.concat_channels([Tensor(a), Tensor(b)])
        np.testing.assert_array_equal(out.data[:, 0], a[:, 0])
        np.testing.assert_array_equal(out.data[:, 1], b[:, 0])

    def test_concat_backward_matches_separate_passes(self, rng):
        a = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal((1, 3, 3, 3)), requires_grad=True)
        proj = rng.standard_normal((1, 5, 3, 3))
        (ad.concat_channels([a, b]) * Tensor(proj)).sum().backward()
        np.testing.assert_array_equal(a.grad, proj[:, :2])
        np.testing.assert_array_equal(b.grad, proj[:, 2:])

    def test_concat_spatial_mismatch(self):
        with pytest.raises(ContractViolation):
            ad.concat_channels([Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3)))])

    def test_broadcast(self):
        np.testing.assert_array_equal(ad.broadcast_spatial(Tensor([[7.0]]), 2, 2).data, np.full((1, 1, 2, 2), 7.0))
        assert ad.broadcast_spatial(Tensor([[1.0, 2.0]]), 1, 1).shape == (1, 2, 1, 1)

    def test_broadcast_backward(self):
        v = Tensor([[1.0]], requires_grad=True)
        ad.broadcast_spatial(v, 3, 3).sum().backward()
        np.testing.assert_array_equal(v.grad, [[9.0]])


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        x.sum().backward()
        assert np.all(x.grad == 1.0)

    def test_square(self, rng):
        x = Tensor(rng.standard_normal(5), requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_reuse_accumulates(self, rng):
        x = Tensor(rng.standard_normal(4), requires_grad=True)
        (x + x).sum().backward()
        assert np.all(x.grad == 2.0)

    def test_non_scalar_rejected(self):
        with pytest.raises(ContractViolation):
            Tensor(np.ones(3), requires_grad=True).backward()

    def test_second_backward_doubles(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 4, 4)), requires_grad=True)
        w = Tensor(rng.standard_normal((2, 1, 3, 3)), requires_grad=True)
        loss = (ad.relu(ad.conv2d(x, w, Tensor(np.zeros(2)), pad=1)) * 2.0).sum()
        loss.backward()
        gx, gw = x.grad.copy(), w.grad.copy()
        loss.backward()
        np.testing.assert_allclose(x.grad, 2 * gx, rtol=1e-15)
        np.testing.assert_allclose(w.grad, 2 * gw, rtol=1e-15)

    def test_tape_is_topological(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 4, 4)), requires_grad=True)
        y = ad.max_pool2d(ad.relu(x + x), 2)
        z = ad.upsample_nearest2x(y) * x
        tape = ad.Tape.from_root(z.sum())
        pos = {id(n): i for i, n in enumerate(tape.nodes)}
        assert len(pos) == len(tape.nodes)
        for node in tape.nodes:
            for p in node._parents:
                if p.requires_grad:
                    assert pos[id(p)] < pos[id(node)]

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with ad.no_grad():
            y = x * 3.0
        assert not y.requires_grad and y.is_leaf

    def test_deterministic(self, rng):
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        outs = [ad.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(4, np.float32)), pad=1).data for _ in range(2)]
        assert outs[0].tobytes() == outs[1].tobytes()

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_debug_mode_flags_overflow(self):
        x = Tensor(np.array([3e38], dtype=np.float32))
        with ad.debug_mode():
            with pytest.raises(NumericalError):
                x * 10.0
        assert np.isinf((x * 10.0).data).all()


class TestGradCheck:
    def test_linear_function_is_exact(self, rng):
        x = Tensor(rng.standard_normal((3, 3)))
        assert ad.grad_check(lambda t: t.sum(), [x], eps=1e-5) < 1e-10

    def test_cube(self):
        x = Tensor([2.0])
        f = lambda t: (t * t * t).sum()  # noqa: E731
        f(Tensor([2.0], requires_grad=True))
        x.requires_grad = True
        f(x).backward()
        assert x.grad[0] == pytest.approx(12.0, abs=1e-12)
        central = (f(Tensor([2.0 + 1e-5])).item() - f(Tensor([2.0 - 1e-5])).item()) / 2e-5
        assert central == pytest.approx(12.0, abs=1e-6)
        assert ad.grad_check(f, [Tensor([2.0])], eps=1e-5) < 1e-6

    def test_masked_mse_through_conv_stack(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 8, 8)))
        w1 = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.5)
        b1 = Tensor(rng.standard_normal(3) * 0.1)
        w2 = Tensor(rng.standard_normal((1, 3, 3, 3)) * 0.5)
        b2 = Tensor(rng.standard_normal(1) * 0.1)
        gt = rng.standard_normal((1, 1, 8, 8))
        valid = (rng.random((1, 1, 8, 8)) > 0.25).astype(float)

        def f(x, w1, b1, w2, b2):
            h = ad.relu(ad.conv2d(x, w1, b1, pad=1))
            return masked_mse(ad.conv2d(h, w2, b2, pad=1), gt, valid)

        assert ad.grad_check(f, [x, w1, b1, w2, b2], eps=1e-6) < 1e-4

    @pytest.mark.parametrize("seed", range(10))
    def test_every_op_on_random_inputs(self, seed):
        rng = np.random.default_rng([seed, 99])
        for name, (f, inputs) in _op_cases(rng).items():
            err = ad.grad_check(f, inputs, eps=EPS)
            assert err < 1e-4, name
