import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matseg import autograd as ag
from matseg.autograd import Variable, backward, grad_check
from matseg.errors import ContractError, ShapeError


def var(x):
    return Variable(np.asarray(x, dtype=np.float64), requires_grad=True)


class TestForward:
    def test_add(self):
        np.testing.assert_array_equal(ag.add(var([1, 2]), var([3, 4])).value, [4, 6])

    def test_sub_mul_scalar(self):
        a, b = var([1.0, 2.0]), var([3.0, 5.0])
        np.testing.assert_array_equal(ag.sub(a, b).value, [-2, -3])
        np.testing.assert_array_equal(ag.mul(a, b).value, [3, 10])
        np.testing.assert_array_equal(ag.scalar_mul(a, 3).value, [3, 6])

    def test_mean_of_zeros(self):
        assert ag.mean(var(np.zeros(4))).value == 0

    def test_relu(self):
        np.testing.assert_array_equal(ag.relu(var([-1, 0, 2])).value, [0, 0, 2])
        np.testing.assert_array_equal(ag.relu(var(np.zeros(3))).value, np.zeros(3))

    def test_sigmoid_values(self):
        assert ag.sigmoid(var([0.0])).value[0] == 0.5
        assert abs(ag.sigmoid(var([40.0])).value[0] - 1.0) < 1e-15

    def test_sigmoid_no_overflow(self):
        with np.errstate(over="raise"):
            out = ag.sigmoid(var([-1e4, 1e4])).value
        np.testing.assert_array_equal(out, [0.0, 1.0])

    def test_concat_shape(self):
        a = Variable(np.zeros((1, 16, 56, 56)))
        assert ag.concat_channels(a, a).shape == (1, 32, 56, 56)

    def test_concat_rejects_mismatch(self):
        with pytest.raises(ShapeError):
            ag.concat_channels(Variable(np.zeros((1, 2, 4, 4))), Variable(np.zeros((1, 2, 4, 5))))

    def test_elementwise_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ag.add(var([1, 2]), var([1, 2, 3]))


class TestBackward:
    def test_square_sum_grad(self):
        x = var([1.0, 2.0])
        backward(ag.sum(ag.square(x)))
        np.testing.assert_array_equal(x.grad, [2, 4])

    def test_relu_grad(self):
        a = var([-1.0, 2.0])
        backward(ag.sum(ag.relu(a)))
        np.testing.assert_array_equal(a.grad, [0, 1])

    def test_relu_subgradient_at_zero(self):
        a = var([0.0])
        backward(ag.sum(ag.relu(a)))
        assert a.grad[0] == 0

    def test_sigmoid_grad_at_zero(self):
        a = var([0.0])
        backward(ag.sum(ag.sigmoid(a)))
        assert a.grad[0] == 0.25

    def test_concat_grad_is_ones(self, rng):
        a, b = var(rng.standard_normal((1, 2, 3, 3))), var(rng.standard_normal((1, 3, 3, 3)))
        backward(ag.sum(ag.concat_channels(a, b)))
        np.testing.assert_array_equal(a.grad, np.ones_like(a.value))
        np.testing.assert_array_equal(b.grad, np.ones_like(b.value))

    def test_fan_out(self):
        x = var([3.0])
        backward(ag.sum(ag.add(x, x)))
        assert x.grad[0] == 2.0

    @pytest.mark.parametrize("k", [1, 2, 5])
    def test_k_way_fan_out_is_linear(self, k, rng):
        x = var(rng.standard_normal(4))
        total = x
        for _ in range(k - 1):
            total = ag.add(total, x)
        backward(ag.sum(total))
        np.testing.assert_array_equal(x.grad, np.full(4, float(k)))

    def test_constant_graph_sets_no_grads(self):
        a, b = Variable(np.ones(2)), Variable(np.ones(2))
        backward(ag.sum(ag.mul(a, b)))
        assert a.grad is None and b.grad is None

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ContractError):
            backward(ag.add(var([1.0, 2.0]), var([1.0, 1.0])))

    def test_grads_accumulate(self):
        x = var([1.0, 2.0])
        backward(ag.sum(x))
        backward(ag.sum(x))
        np.testing.assert_array_equal(x.grad, [2, 2])

    def test_grad_shapes_match_values(self, rng):
        a = var(rng.standard_normal((2, 3, 4, 4)))
        b = var(rng.standard_normal((2, 1, 4, 4)))
        c = ag.slice_channels(ag.concat_channels(a, b), 3, 1)
        backward(ag.mean(ag.square(ag.sigmoid(c))))
        assert a.grad.shape == a.shape and b.grad.shape == b.shape

    def test_backward_deterministic(self, rng):
        data = rng.standard_normal((3, 5))

        def run():
            x = var(data)
            y = ag.mul(ag.relu(x), ag.sigmoid(x))
            backward(ag.mean(ag.add(y, ag.square(x))))
            return x.grad

        assert run().tobytes() == run().tobytes()

    def test_deep_chain_no_recursion_limit(self):
        x = var([1.0])
        y = x
        for _ in range(5000):
            y = ag.add_scalar(y, 0.0)
        backward(ag.sum(y))
        assert x.grad[0] == 1.0


class TestNoGrad:
    def test_no_graph_recorded(self):
        x = var([1.0])
        with ag.no_grad():
            y = ag.square(x)
        assert not y.requires_grad and not y.parents

    def test_thread_local(self):
        seen = {}

        def worker():
            seen["enabled"] = ag.grad_enabled()

        with ag.no_grad():
            t = threading.Thread(target=worker)
            t.start()
            t.join()
        assert seen["enabled"] is True and ag.grad_enabled()


class TestGradCheck:
    def test_square_sum_tight(self):
        r = grad_check(lambda x: ag.sum(ag.square(x)), [np.array([1.0, 2.0, 3.0])], epsilon=1e-5)
        assert r.passed and r.max_relative_error < 1e-7

    def test_linear_is_machine_precision(self, rng):
        w = Variable(rng.standard_normal(6))
        r = grad_check(lambda x: ag.sum(ag.mul(x, w)), [rng.standard_normal(6)], epsilon=1e-3)
        assert r.max_relative_error < 1e-9

    def test_detects_wrong_backward(self):
        def bad_square(a):
            return ag.make_node(a.value ** 2, (a,), lambda g: (g * 3 * a.value,), "bad_square")

        r = grad_check(lambda x: ag.sum(bad_square(x)), [np.array([1.0, 2.0])])
        assert not r.passed

    def test_epsilon_must_be_positive(self):
        with pytest.raises(ContractError):
            grad_check(lambda x: ag.sum(x), [np.ones(2)], epsilon=0)

    def test_report_dict(self):
        r = grad_check(lambda x: ag.sum(x), [np.ones(2)], op_name="sum")
        d = r.as_dict()
        assert d["op"] == "sum" and d["passed"] is True and d["tolerance"] == 1e-4


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_elementwise_ops_gradcheck_many_seeds(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    k = np.where(np.abs(a) < 1e-3, 0.5, a)
    r = rng.standard_normal((2, 3))
    checks = [
        (lambda u, v: ag.sum(ag.mul(ag.add(u, v), Variable(r))), [a, b]),
        (lambda u, v: ag.sum(ag.mul(ag.sub(u, v), Variable(r))), [a, b]),
        (lambda u, v: ag.sum(ag.mul(ag.mul(u, v), Variable(r))), [a, b]),
        (lambda u: ag.sum(ag.mul(ag.relu(u), Variable(r))), [k]),
        (lambda u: ag.sum(ag.mul(ag.sigmoid(u), Variable(r))), [a]),
        (lambda u: ag.mean(ag.square(u)), [a]),
    ]
    for f, inputs in checks:
        assert grad_check(f, inputs).max_relative_error < 1e-4
