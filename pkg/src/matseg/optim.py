"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .autograd import Variable
from .errors import ContractError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Tuple[str, Variable]], state: AdamState) -> AdamState:
    """Apply one Adam update in place to every named parameter.

    Gradients are read from ``param.grad``; every parameter must have one.
    """
    missing = [name for name, p in params if p.grad is None]
    if missing:
        raise ContractError(f"adam_step: no gradient for parameter(s) {', '.join(missing)}")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params:
        g = p.grad
        if g.shape != p.value.shape:
            raise ContractError(f"adam_step: gradient shape {g.shape} != parameter shape {p.value.shape} for {name}")
        dt = p.value.dtype
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.value)
            v = np.zeros_like(p.value)
        m = dt.type(b1) * m + dt.type(1 - b1) * g
        v = dt.type(b2) * v + dt.type(1 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        m_hat = m / dt.type(c1)
        v_hat = v / dt.type(c2)
        p.value = p.value - dt.type(state.lr) * m_hat / (np.sqrt(v_hat) + dt.type(state.eps))
    return state


class Adam:
    """Stateful wrapper binding an :class:`AdamState` to a parameter list."""

    def __init__(self, named_params: Sequence[Tuple[str, Variable]], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params: List[Tuple[str, Variable]] = list(named_params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, self.state)
