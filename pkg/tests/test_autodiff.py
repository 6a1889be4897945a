import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taskdriven import autodiff as ad
from taskdriven.autodiff import ContractViolation, GraphConsumedError, NumericalDomainError, Tensor
from taskdriven.gradcheck import check_gradients, numerical_gradient, relative_error


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def leaf(x):
    return Tensor(np.array(x, dtype=float), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        out = ad.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3], [4]]))
        np.testing.assert_array_equal(out.data, [[3], [4]])

    def test_dot(self):
        assert ad.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11]]

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradient_of_sum_matches_finite_differences(self, rng):
        err = check_gradients(lambda t: ad.sum(ad.matmul(t[0], t[1])), [rng.normal(size=(3, 3)), rng.normal(size=(3, 3))])
        assert err <= 1e-6


class TestElementwise:
    def test_elu_cases(self):
        assert ad.elu(Tensor(-50.0)).item() == pytest.approx(-1.0)
        assert ad.elu(Tensor(0.0)).item() == 0.0
        assert ad.elu(Tensor(2.0)).item() == 2.0

    def test_tanh_at_zero(self):
        x = leaf(0.0)
        y = ad.tanh(x)
        y.backward()
        assert y.item() == 0.0
        assert x.grad == pytest.approx(1.0)

    def test_exp_gradient(self):
        assert check_gradients(lambda t: ad.sum(ad.exp(t[0])), [np.array([1.0])]) <= 1e-6

    def test_log_domain_error_reports_index(self):
        with pytest.raises(NumericalDomainError) as info:
            ad.log(Tensor([[1.0, 2.0], [0.0, 3.0]]))
        assert info.value.index == (1, 0)

    def test_scalar_broadcast_only(self):
        assert ad.add(Tensor([1.0, 2.0]), Tensor(3.0)).data.tolist() == [4.0, 5.0]
        with pytest.raises(ContractViolation):
            ad.add(Tensor(np.ones(2)), Tensor(np.ones(3)))

    def test_dispatch(self):
        assert ad.elementwise("scale-by-constant", Tensor([1.0, 2.0]), 3.0).data.tolist() == [3.0, 6.0]
        assert ad.elementwise("square", Tensor([3.0])).data.tolist() == [9.0]
        with pytest.raises(ContractViolation):
            ad.elementwise("cosh", Tensor(1.0))

    def test_scalar_broadcast_gradient(self, rng):
        err = check_gradients(lambda t: ad.sum(ad.mul(t[0], t[1])), [rng.normal(size=(4,)), np.array(0.7)])
        assert err <= 1e-6


class TestReduce:
    def test_mean(self):
        assert ad.mean(Tensor([1.0, 2.0, 3.0])).item() == 2.0

    def test_logsumexp_no_overflow(self):
        assert ad.logsumexp(Tensor([1000.0, 1000.0])).item() == pytest.approx(1000 + math.log(2), abs=1e-12)

    def test_logsumexp_gradient_is_softmax(self, rng):
        x = rng.normal(size=5)
        t = leaf(x)
        ad.logsumexp(t).backward()
        np.testing.assert_allclose(t.grad, np.exp(x) / np.exp(x).sum(), rtol=1e-12)
        assert check_gradients(lambda ts: ad.logsumexp(ts[0]), [x]) <= 1e-6

    def test_empty_axis(self):
        with pytest.raises(ContractViolation):
            ad.reduce("sum", Tensor(np.zeros((0, 3))), axis=0)

    def test_axis_reductions(self, rng):
        x = rng.normal(size=(3, 4))
        for op in ("sum", "mean", "logsumexp", "max"):
            assert check_gradients(lambda t, op=op: ad.sum(ad.square(ad.reduce(op, t[0], axis=1))), [x]) <= 1e-6

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-700, 700), min_size=1, max_size=20))
    def test_logsumexp_finite(self, values):
        assert np.isfinite(ad.logsumexp(Tensor(values)).item())


class TestConv:
    def test_window_sums(self):
        x = Tensor(np.arange(16.0).reshape(1, 4, 4))
        out = ad.conv2d(x, Tensor(np.ones((1, 1, 2, 2))), stride=2)
        np.testing.assert_array_equal(out.data, [[[10, 18], [42, 50]]])

    def test_output_shape(self, rng):
        out = ad.conv2d(Tensor(rng.normal(size=(3, 64, 64))), Tensor(rng.normal(size=(6, 3, 4, 4))), stride=2)
        assert out.shape == (6, 31, 31)

    def test_kernel_gradient(self, rng):
        x = rng.normal(size=(1, 6, 6))
        err = check_gradients(lambda t: ad.sum(ad.square(ad.conv2d(Tensor(x), t[0], 2))), [rng.normal(size=(2, 1, 3, 3))])
        assert err <= 1e-5

    def test_batched_input_and_bias_gradients(self, rng):
        err = check_gradients(
            lambda t: ad.sum(ad.tanh(ad.conv2d(t[0], t[1], 2, t[2]))),
            [rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 4, 4)), rng.normal(size=4)],
        )
        assert err <= 1e-6

    def test_kernel_larger_than_input(self):
        with pytest.raises(ContractViolation):
            ad.conv2d(Tensor(np.zeros((1, 3, 3))), Tensor(np.zeros((1, 1, 4, 4))))


class TestGaussianLogprob:
    def test_standard_normal_at_mode(self):
        assert ad.gaussian_logprob(Tensor([0.0]), Tensor([0.0]), Tensor([0.0])).item() == pytest.approx(-0.918939, abs=1e-6)

    def test_two_dims_at_mean(self):
        v = ad.gaussian_logprob(Tensor([1.3, -2.0]), Tensor([1.3, -2.0]), Tensor([0.0, 0.0])).item()
        assert v == pytest.approx(-math.log(2 * math.pi), abs=1e-12)

    def test_gradient(self, rng):
        x, m, s = rng.normal(size=(3, 4))
        assert check_gradients(lambda t: ad.gaussian_logprob(Tensor(x), t[0], Tensor(s)), [m]) <= 1e-6
        assert check_gradients(lambda t: ad.gaussian_logprob(t[0], t[1], t[2]), [x, m, s]) <= 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            ad.gaussian_logprob(Tensor([0.0]), Tensor([0.0, 1.0]), Tensor([0.0]))


class TestBackward:
    def test_leaf(self):
        x = leaf(3.0)
        grads = ad.backward(ad.scale(x, 1.0))
        assert grads[x] == pytest.approx(1.0)

    def test_sum_of_squares(self):
        x = leaf([1.0, 2.0])
        ad.sum(ad.mul(x, x)).backward()
        assert x.grad.tolist() == [2.0, 4.0]

    def test_second_call_errors(self):
        x = leaf([1.0])
        loss = ad.sum(ad.exp(x))
        loss.backward()
        with pytest.raises(GraphConsumedError):
            loss.backward()

    def test_non_scalar(self):
        with pytest.raises(ContractViolation):
            ad.backward(ad.exp(leaf([1.0, 2.0])))

    def test_composite_mlp(self, rng):
        x = rng.normal(size=(5, 3))

        def build(t):
            h = ad.elu(ad.linear(Tensor(x), t[0], t[1]))
            return ad.mean(ad.tanh(ad.linear(h, t[2], t[3])))

        err = check_gradients(build, [rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=(4, 2)), rng.normal(size=2)])
        assert err <= 1e-5

    def test_shared_subexpression_accumulates(self):
        x = leaf([2.0])
        y = ad.exp(x)
        ad.sum(ad.add(y, y)).backward()
        assert x.grad[0] == pytest.approx(2 * math.exp(2.0))

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with ad.no_grad():
            y = ad.exp(x)
        assert not y.requires_grad


def test_take_and_concat_gradients(rng):
    idx = np.array([0, 2, 2, 1])
    err = check_gradients(lambda t: ad.sum(ad.square(ad.concat([ad.take(t[0], idx), t[1]], axis=1))), [rng.normal(size=(3, 2)), rng.normal(size=(4, 3))])
    assert err <= 1e-6


def test_clamp_blocks_gradient_outside():
    x = leaf([-10.0, 0.5, 10.0])
    ad.sum(ad.clamp(x, -5, 2)).backward()
    assert x.grad.tolist() == [0.0, 1.0, 0.0]


def test_forward_is_deterministic(rng):
    x, w, b = rng.normal(size=(8, 3)), rng.normal(size=(3, 5)), rng.normal(size=5)
    a = ad.elu(ad.linear(Tensor(x), Tensor(w), Tensor(b))).data
    c = ad.elu(ad.linear(Tensor(x), Tensor(w), Tensor(b))).data
    assert a.tobytes() == c.tobytes()


def test_numerical_gradient_restores_input():
    x = np.array([1.0, 2.0])
    numerical_gradient(lambda: float(np.sum(x**2)), x)
    assert x.tolist() == [1.0, 2.0]
    assert relative_error(np.zeros(2), np.zeros(2)) == 0.0
