import math

import numpy as np
import pytest

from matseg.autograd import Variable
from matseg.errors import ContractError
from matseg.optim import Adam, AdamState, adam_step

# theta after each of 10 Adam steps on (theta - 3)^2 from theta=0, lr=0.1,
# betas (0.9, 0.999), eps 1e-8; evaluated with 50-digit arithmetic
ADAM_REFERENCE = [
    0.099999999833333333611, 0.1998972925852117066, 0.29961847654925339188, 0.39908646894421574357,
    0.49822054377271428603, 0.59693639261853456744, 0.69514621069693689764, 0.79275881061020308949,
    0.88967976637662892206, 0.98581159038304693558,
]


def scalar_adam(theta, grad_fn, steps, lr=0.1, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(theta)
    return out


def run_adam(steps, lr=0.1):
    p = Variable(np.array([0.0]), requires_grad=True)
    state = AdamState(lr=lr)
    seq = []
    for _ in range(steps):
        p.grad = 2 * (p.value - 3.0)
        adam_step([("theta", p)], state)
        seq.append(float(p.value[0]))
    return seq, state


def test_ten_steps_match_reference():
    seq, state = run_adam(10)
    assert state.t == 10
    for got, ref in zip(seq, ADAM_REFERENCE):
        assert abs(got - ref) < 1e-10


def test_scalar_reference_agrees_with_frozen_values():
    for got, ref in zip(scalar_adam(0.0, lambda th: 2 * (th - 3.0), 10), ADAM_REFERENCE):
        assert abs(got - ref) < 1e-12


def test_zero_gradient_fixed_point():
    p = Variable(np.array([1.5, -2.0]), requires_grad=True)
    state = AdamState()
    p.grad = np.zeros(2)
    adam_step([("p", p)], state)
    np.testing.assert_array_equal(p.value, [1.5, -2.0])
    assert state.t == 1


@pytest.mark.parametrize("g", [1e-3, 0.5, -7.0, 1e4])
def test_first_step_is_lr_sign(g):
    p = Variable(np.array([0.0]), requires_grad=True)
    p.grad = np.array([g])
    adam_step([("p", p)], AdamState(lr=1e-3))
    assert p.value[0] == pytest.approx(-1e-3 * np.sign(g), rel=1e-4)


def test_two_unit_steps_decrease():
    p = Variable(np.array([0.0]), requires_grad=True)
    state = AdamState(lr=1e-3)
    values = [0.0]
    for _ in range(2):
        p.grad = np.array([1.0])
        adam_step([("p", p)], state)
        values.append(p.value[0])
    assert values[0] > values[1] > values[2]
    assert values[2] == pytest.approx(-2e-3, rel=1e-6)


def test_missing_grad_names_parameter():
    p = Variable(np.zeros(1), requires_grad=True)
    with pytest.raises(ContractError, match="lonely"):
        adam_step([("lonely", p)], AdamState())


def test_float32_params_stay_float32():
    p = Variable(np.ones(3, np.float32), requires_grad=True)
    opt = Adam([("p", p)])
    p.grad = np.ones(3, np.float32)
    opt.step()
    assert p.value.dtype == np.float32
    opt.zero_grad()
    assert p.grad is None
