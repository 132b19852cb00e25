"""Finite-difference gradient checks for every differentiable op, in float64.

Ops are reduced to a scalar by an inner product with a fixed random
weighting so each input coordinate gets an O(1) gradient.
"""

from __future__ import annotations

from typing import Callable, Dict, List, Tuple

import numpy as np

from . import autograd as ag
from . import layers, losses
from .autograd import GradCheckReport, Variable, grad_check, grad_check_params
from .models import UNetConfig, build_matae_unet, build_vanilla_unet

GROUPS = ("tensor", "layers", "models")
TOLERANCE = 1e-4
EPSILON = 1e-6
# Whole-network losses have gradients down to ~1e-8 per parameter, where a
# 1e-6 step loses too many digits to roundoff; their checks use a larger
# step and step around relu/maxpool kinks instead.
MODEL_EPSILON = 1e-4
MODEL_COORDS = 12


def _jitter(model, rng: np.random.Generator, scale: float = 0.1) -> None:
    """Move every parameter off its initial value (zero biases put relus exactly on a kink)."""
    for _, p in model.named_parameters():
        p.value = p.value + scale * rng.standard_normal(p.value.shape)


def _projected(op, rng):
    """Scalar objective sum(op(...) * r) with a fixed random ``r``."""
    cache = {}

    def f(*xs):
        out = op(*xs)
        if "r" not in cache:
            cache["r"] = rng.standard_normal(out.shape)
        return ag.sum(ag.mul(out, Variable(cache["r"])))

    return f


def _check(name, op, inputs, rng) -> GradCheckReport:
    return grad_check(_projected(op, rng), inputs, EPSILON, TOLERANCE, op_name=name)


def _tensor_checks(rng: np.random.Generator) -> List[GradCheckReport]:
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    # keep relu inputs away from the kink at zero
    k = rng.standard_normal((3, 4))
    k = np.where(np.abs(k) < 0.05, 0.5, k)
    x4, y4 = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 2, 4, 4))
    return [
        _check("add", ag.add, [a, b], rng),
        _check("sub", ag.sub, [a, b], rng),
        _check("mul", ag.mul, [a, b], rng),
        _check("scalar_mul", lambda u: ag.scalar_mul(u, -2.5), [a], rng),
        grad_check(lambda u: ag.sum(ag.square(u)), [a], EPSILON, TOLERANCE, op_name="sum"),
        grad_check(lambda u: ag.mean(ag.square(u)), [a], EPSILON, TOLERANCE, op_name="mean"),
        _check("relu", ag.relu, [k], rng),
        _check("sigmoid", ag.sigmoid, [2 * a], rng),
        _check("concat_channels", ag.concat_channels, [x4, y4], rng),
        _check("slice_channels", lambda u: ag.slice_channels(u, 2), [x4], rng),
    ]


def _layer_checks(rng: np.random.Generator) -> List[GradCheckReport]:
    x = rng.standard_normal((1, 4, 6, 6))
    w = rng.standard_normal((3, 4, 3, 3)) * 0.3
    bias = rng.standard_normal(3)
    xs = rng.standard_normal((2, 2, 6, 6))
    ws = rng.standard_normal((3, 2, 2, 2))
    pool_in = rng.permutation(2 * 3 * 6 * 6).reshape(2, 3, 6, 6) / 10.0  # distinct values, no ties
    tx = rng.standard_normal((2, 3, 3, 3))
    tw = rng.standard_normal((3, 2, 2, 2))
    tb = rng.standard_normal(2)

    block = layers.ConvBlock(2, 3, rng=rng, dtype=np.float64)
    for _, p in block.named_parameters():
        p.value = p.value + 0.1 * rng.standard_normal(p.value.shape)
    bx = Variable(rng.standard_normal((1, 2, 5, 5)))
    r_block = rng.standard_normal((1, 3, 5, 5))

    def block_loss():
        return ag.sum(ag.mul(block(bx), Variable(r_block)))

    return [
        _check("conv2d", lambda u, v, c: layers.conv2d(u, v, c, padding=1), [x, w, bias], rng),
        _check("conv2d_stride2", lambda u, v: layers.conv2d(u, v, stride=2), [xs, ws], rng),
        _check("maxpool2d", layers.maxpool2d, [pool_in], rng),
        _check("conv_transpose2d", layers.conv_transpose2d, [tx, tw, tb], rng),
        _check("conv_block_input", lambda u: block(u), [bx.value], rng),
        grad_check_params(block_loss, block.named_parameters(), EPSILON, TOLERANCE, op_name="conv_block_params"),
    ]


def _model_checks(rng: np.random.Generator) -> List[GradCheckReport]:
    # moderate logits: deep in saturation the true gradient drops below what
    # central differences on an O(1) loss can resolve to 1e-4 relative
    z = rng.standard_normal((2, 1, 4, 4)) * 2
    y = (rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64)
    pred = rng.standard_normal((2, 1, 4, 4))
    tgt = rng.standard_normal((2, 1, 4, 4))
    pred2 = rng.standard_normal((2, 1, 2, 2))
    tgt2 = rng.standard_normal((2, 1, 2, 2))

    reports = [
        grad_check(lambda u: losses.bce_with_logits(u, y), [z], EPSILON, TOLERANCE, op_name="bce_with_logits"),
        grad_check(lambda u, v: losses.matryoshka_loss([u, v], [tgt, tgt2]), [pred, pred2], EPSILON, TOLERANCE,
                   op_name="matryoshka_loss"),
    ]

    x = rng.random((2, 1, 8, 8))
    masks = (rng.random((2, 1, 8, 8)) > 0.5).astype(np.float64)
    cfg = UNetConfig(depth=2, base_channels=4, seed=int(rng.integers(1 << 31)))

    vanilla = build_vanilla_unet(cfg, dtype=np.float64)
    _jitter(vanilla, rng)

    def vanilla_loss():
        return losses.composite_loss(vanilla(x), masks)[0]

    reports.append(grad_check_params(vanilla_loss, vanilla.named_parameters(), MODEL_EPSILON, TOLERANCE,
                                     op_name="vanilla_unet_loss", max_coords=MODEL_COORDS, rng=rng,
                                     skip_kinks=True))

    matae = build_matae_unet(cfg, dtype=np.float64)
    _jitter(matae, rng)
    targets = matae.reconstruction_targets(x)

    def matae_loss():
        return losses.composite_loss(matae(x), masks, targets, weight=0.5)[0]

    reports.append(grad_check_params(matae_loss, matae.named_parameters(), MODEL_EPSILON, TOLERANCE,
                                     op_name="matae_unet_loss", max_coords=MODEL_COORDS, rng=rng,
                                     skip_kinks=True))
    return reports


_GROUP_FNS: Dict[str, Callable[[np.random.Generator], List[GradCheckReport]]] = {
    "tensor": _tensor_checks,
    "layers": _layer_checks,
    "models": _model_checks,
}


def run_suite(module: str = "all", seed: int = 0) -> List[Tuple[str, GradCheckReport]]:
    """Run the checks for one group (or ``"all"``); returns ``(group, report)`` pairs."""
    groups = GROUPS if module == "all" else (module,)
    out = []
    for i, group in enumerate(groups):
        if group not in _GROUP_FNS:
            raise ValueError(f"unknown gradcheck module {group!r}")
        rng = np.random.default_rng([seed, i])
        out.extend((group, r) for r in _GROUP_FNS[group](rng))
    return out
