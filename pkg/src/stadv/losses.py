"""Attack objective: logit-margin loss, flow smoothness loss and their sum."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor, as_tensor
from .warp import bilinear_warp, grid_scale

__all__ = [
    "AttackObjectiveConfig",
    "FLOW_EPS",
    "FLOW_UNITS",
    "adv_loss",
    "adv_loss_untargeted",
    "margin_loss",
    "flow_loss",
    "total_objective",
    "objective_terms",
    "objective_forward",
]

FLOW_EPS = 1e-8
FLOW_UNITS = ("grid", "pixel")


@dataclass(frozen=True)
class AttackObjectiveConfig:
    """Weights and classes for one attack.

    ``target_class=None`` means untargeted: push ``true_class`` off the top.
    ``flow_units`` picks how the smoothness term measures the flow: ``"grid"``
    rescales it to normalised [-1, 1] coordinates first, ``"pixel"`` uses it
    as is. The warp itself always reads pixel displacements.
    """

    true_class: int
    target_class: Optional[int] = None
    tau: float = 0.05
    kappa: float = 0.0
    flow_units: str = "grid"

    def __post_init__(self):
        if self.flow_units not in FLOW_UNITS:
            raise ValueError(f"flow_units must be one of {FLOW_UNITS}, got {self.flow_units!r}")
        if self.tau < 0:
            raise ValueError(f"tau must be non-negative, got {self.tau}")
        if self.target_class is not None and self.target_class == self.true_class:
            raise ValueError("target_class must differ from true_class for a targeted attack")

    @property
    def targeted(self):
        return self.target_class is not None


def _validate_class(logits, cls, what):
    k = logits.shape[-1]
    if logits.ndim != 1 or k < 2:
        raise T.ShapeError(f"{what} (logits must be a vector of length >= 2)", logits.shape)
    if not (isinstance(cls, (int, np.integer)) and 0 <= cls < k):
        raise ValueError(f"{what}: class index {cls!r} outside [0, {k})")


def _others(k, cls):
    return np.array([i for i in range(k) if i != cls], dtype=np.intp)


def adv_loss(logits, target, kappa=0.0):
    """``max(max_{i != t} z_i - z_t, kappa)`` for a logit vector ``z``."""
    logits = as_tensor(logits)
    _validate_class(logits, target, "adv_loss")
    margin = T.amax(logits[_others(logits.shape[0], target)]) - logits[target]
    return T.maximum(margin, float(kappa))


def adv_loss_untargeted(logits, true_class, kappa=0.0):
    """``max(z_y - max_{i != y} z_i, kappa)``: zero once ``y`` is out-scored."""
    logits = as_tensor(logits)
    _validate_class(logits, true_class, "adv_loss_untargeted")
    margin = logits[true_class] - T.amax(logits[_others(logits.shape[0], true_class)])
    return T.maximum(margin, float(kappa))


def margin_loss(logits, cfg):
    if cfg.targeted:
        return adv_loss(logits, cfg.target_class, cfg.kappa)
    return adv_loss_untargeted(logits, cfg.true_class, cfg.kappa)


def flow_loss(flow, eps=FLOW_EPS):
    """Total variation of a (H,W,2) flow over 4-connected neighbours.

    Every adjacency is counted once per direction. Each term is
    ``sqrt(|f_p - f_q|^2 + eps) - sqrt(eps)``, so constant flows score exactly 0
    while the gradient stays finite at the zero-flow start.
    """
    flow = as_tensor(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise T.ShapeError("flow_loss", flow.shape)
    if not np.all(np.isfinite(flow.data)):
        raise ValueError("flow_loss: flow field contains non-finite values")
    root_eps = float(np.sqrt(eps))
    result = Tensor(0.0)
    for a, b in (
        (flow[1:, :, :], flow[:-1, :, :]),
        (flow[:, 1:, :], flow[:, :-1, :]),
    ):
        if a.size == 0:
            continue
        d = a - b
        sq = (d * d).sum(axis=2)
        result = result + (T.sqrt(sq + eps) - root_eps).sum()
    return result * 2.0


def objective_forward(x, flow, model, cfg):
    """Forward pass of the attack objective with a deferred gradient.

    Returns ``(value, logits, grad_fn, adv_term, flow_term)``. ``grad_fn()``
    runs the backward pass and returns the gradient with respect to ``flow``.
    """
    f = Tensor(np.asarray(flow, dtype=np.float64), requires_grad=True)
    warped = bilinear_warp(np.asarray(x, dtype=np.float64), f)
    logits = model.forward(warped.reshape((1,) + warped.shape))
    z = logits.reshape(-1)
    adv = margin_loss(z, cfg)
    obj = adv
    fl = None
    if cfg.tau > 0:
        scaled = f * np.broadcast_to(grid_scale(*f.shape[:2]), f.shape) if cfg.flow_units == "grid" else f
        fl = flow_loss(scaled)
        obj = adv + fl * cfg.tau

    def grad_fn():
        obj.backward()
        return f.grad if f.grad is not None else np.zeros_like(f.data)

    return (
        float(obj.data),
        z.data.copy(),
        grad_fn,
        float(adv.data),
        float(fl.data) if fl is not None else 0.0,
    )


def objective_terms(x, flow, model, cfg):
    """Evaluate the attack objective at ``flow``.

    Returns ``(value, grad_wrt_flow, logits, adv_term, flow_term)`` with plain
    numpy / float values. ``x`` is an (H,W,C) image in the model's range.
    """
    value, logits, grad_fn, adv, fl = objective_forward(x, flow, model, cfg)
    return value, grad_fn(), logits, adv, fl


def total_objective(x, flow, model, cfg):
    """Margin loss of the warped image plus ``tau`` times the flow loss.

    Returns ``(value, gradient with respect to flow)``.
    """
    value, grad, *_ = objective_terms(x, flow, model, cfg)
    return value, grad
