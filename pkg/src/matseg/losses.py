"""Segmentation and Matryoshka reconstruction losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .autograd import Variable, flush_subnormals, make_node, scalar_mul, stable_sigmoid
from .errors import ContractError, ShapeError, ValidationError

# residuals this small come only from saturated logits; dropping them keeps
# downstream float32 gradients out of the subnormal range
SATURATION_FLOOR = 1e-30


def bce_with_logits(logits: Variable, targets: np.ndarray) -> Variable:
    """Mean binary cross-entropy computed directly on logits.

    Uses ``max(z, 0) - z*y + log1p(exp(-|z|))`` so no intermediate
    overflows; the gradient is ``(sigmoid(z) - y) / N``.
    """
    z = logits.value
    y = np.asarray(targets)
    if y.shape != z.shape:
        raise ShapeError(f"bce_with_logits: logits {z.shape} vs targets {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("bce_with_logits: targets must be binary (0 or 1)")
    y = y.astype(z.dtype, copy=False)
    n = z.size
    per_elem = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    value = np.asarray(per_elem.mean(dtype=np.float64), dtype=z.dtype)

    def backward_fn(g):
        resid = flush_subnormals(stable_sigmoid(z) - y, SATURATION_FLOOR)
        return (resid * (g.reshape(()) / n),)

    return make_node(value, (logits,), backward_fn, "bce_with_logits")


def mse(pred: Variable, target: np.ndarray) -> Variable:
    """Mean squared error against a constant target."""
    p = pred.value
    t = np.asarray(target, dtype=p.dtype)
    if t.shape != p.shape:
        raise ShapeError(f"mse: prediction {p.shape} vs target {t.shape}")
    resid = p - t
    n = p.size
    value = np.asarray(np.mean(resid * resid, dtype=np.float64), dtype=p.dtype)
    return make_node(value, (pred,), lambda g: (resid * (2 * g.reshape(()) / n),), "mse")


def matryoshka_loss(reconstructions: Sequence, targets: Sequence[np.ndarray]) -> Variable:
    """Sum over (stage, fraction) pairs of the per-pair MSE.

    ``reconstructions`` may hold Variables or ``(stage, fraction, Variable)``
    triples as returned by ``MatAEUNet.forward``.
    """
    if len(reconstructions) != len(targets):
        raise ContractError(
            f"matryoshka_loss: {len(reconstructions)} reconstructions but {len(targets)} targets"
        )
    if not reconstructions:
        raise ContractError("matryoshka_loss: no reconstruction pairs")
    total = None
    for rec, tgt in zip(reconstructions, targets):
        rec = rec[-1] if isinstance(rec, tuple) else rec
        term = mse(rec, tgt)
        total = term if total is None else total + term
    return total


@dataclass
class LossBreakdown:
    segmentation_bce: float
    matryoshka_mse: float
    total: float

    def as_dict(self) -> dict:
        return {"segmentation_bce": self.segmentation_bce, "matryoshka_mse": self.matryoshka_mse, "total": self.total}


def composite_loss(output, masks: np.ndarray, recon_targets: Sequence[np.ndarray] = (),
                   weight: float = 0.1) -> Tuple[Variable, LossBreakdown]:
    """BCE on the segmentation logits plus ``weight`` times the Matryoshka MSE.

    The reconstruction term is kept in the graph even when ``weight`` is 0 so
    every head still receives a (zero) gradient.
    """
    seg = bce_with_logits(output.logits, masks)
    if not output.aux_reconstructions:
        v = float(seg.value)
        return seg, LossBreakdown(v, 0.0, v)
    aux = matryoshka_loss(output.aux_reconstructions, recon_targets)
    total = seg + scalar_mul(aux, weight)
    return total, LossBreakdown(float(seg.value), float(aux.value), float(total.value))
