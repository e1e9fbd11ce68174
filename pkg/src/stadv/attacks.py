"""Attack drivers: spatial-flow (stAdv), FGSM, PGD and a margin-loss C&W.

All single-input drivers return an :class:`AttackOutcome` whose ``success``
flag is recomputed with :func:`predict` on the stored adversarial image.
Models are duck-typed: anything with ``forward``, ``input_shape``,
``num_classes``, ``pixel_range`` and ``name`` works, including the blur
composite from :mod:`stadv.defenses`.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .losses import AttackObjectiveConfig, margin_loss, objective_forward
from .metrics import flow_l2_metric, flow_tv_metric
from .models import predict
from .solver import LbfgsConfig, NonFiniteObjective, lbfgs_minimize
from .tensor import Tensor

__all__ = [
    "AttackOutcome",
    "goal_met",
    "stadv_attack",
    "stadv_attack_gridsearch",
    "default_tau_grid",
    "fgsm_attack",
    "fgsm_perturb",
    "pgd_attack",
    "pgd_perturb",
    "cw_attack",
    "adaptive_blur_attack",
    "input_gradient",
]


@dataclass
class AttackOutcome:
    method: str
    image: np.ndarray
    success: bool
    true_class: int
    target: Optional[int] = None
    flow: Optional[np.ndarray] = None
    trace: list = field(default_factory=list)
    flow_tv: Optional[float] = None
    flow_l2: Optional[float] = None
    tau: Optional[float] = None
    wall_ms: float = 0.0
    prediction: int = -1
    info: dict = field(default_factory=dict)

    @property
    def targeted(self):
        return self.target is not None


def goal_met(pred, true_class, target=None):
    return pred == target if target is not None else pred != true_class


def _finish(outcome, model, started):
    outcome.prediction = predict(model, outcome.image)
    outcome.success = bool(goal_met(outcome.prediction, outcome.true_class, outcome.target))
    outcome.wall_ms = (time.perf_counter() - started) * 1000.0
    return outcome


# --- spatial flow attack ----------------------------------------------------


def stadv_attack(model, x, cfg, solver_cfg=None):
    """Optimise a flow field so the warped ``x`` meets the goal in ``cfg``.

    The flow starts at zero and is refined by L-BFGS on
    ``margin + tau * flow_tv``. Reported flow metrics use ``cfg.flow_units``
    while ``outcome.flow`` stays in pixels. Because the margin is floored at ``kappa`` the
    solver settles on the decision boundary, so every evaluated flow that
    already meets the goal is remembered and the one with the smallest
    objective is returned; if none did, the solver's final flow is used.
    """
    started = time.perf_counter()
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[:2]
    best = {"value": math.inf, "flow": None}

    def fun(vec):
        flow = vec.reshape(h, w, 2)
        value, logits, grad_fn, _, _ = objective_forward(x, flow, model, cfg)
        pred = int(np.argmax(logits))
        if goal_met(pred, cfg.true_class, cfg.target_class) and value < best["value"]:
            best["value"], best["flow"] = value, flow.copy()
        return value, grad_fn

    flow0 = np.zeros((h, w, 2))
    try:
        vec, trace = lbfgs_minimize(fun, flow0.reshape(-1), solver_cfg or LbfgsConfig())
        flow = best["flow"] if best["flow"] is not None else vec.reshape(h, w, 2)
        objective, reason, iters = trace.objective, trace.reason, trace.iterations
    except (NonFiniteObjective, FloatingPointError) as err:
        flow, objective, reason, iters = flow0, [], f"solver error: {err}", 0

    from .warp import to_grid_units, warp_image

    metric_flow = to_grid_units(flow) if cfg.flow_units == "grid" else flow
    outcome = AttackOutcome(
        method="stadv",
        image=warp_image(x, flow),
        success=False,
        true_class=cfg.true_class,
        target=cfg.target_class,
        flow=flow,
        trace=list(objective),
        flow_tv=flow_tv_metric(metric_flow),
        flow_l2=flow_l2_metric(metric_flow),
        tau=cfg.tau,
        info={"termination": reason, "iterations": iters, "kappa": cfg.kappa, "flow_units": cfg.flow_units},
    )
    return _finish(outcome, model, started)


def default_tau_grid(lo=0.0005, hi=0.05, num=10):
    """Log-spaced tau values, largest first."""
    return sorted(np.geomspace(lo, hi, num).tolist(), reverse=True)


def stadv_attack_gridsearch(model, x, cfg, tau_grid=None, solver_cfg=None):
    """Run :func:`stadv_attack` for each tau and keep the least deformed success.

    Among successful runs the one with the smallest flow TV wins (ties go to
    the larger tau). With no success, the run with the lowest final margin
    loss is returned.
    """
    started = time.perf_counter()
    grid = sorted(tau_grid if tau_grid is not None else default_tau_grid(), reverse=True)
    if not grid:
        raise ValueError("tau_grid must not be empty")
    runs = [stadv_attack(model, x, replace(cfg, tau=float(t)), solver_cfg) for t in grid]
    wins = [r for r in runs if r.success]
    if wins:
        chosen = min(wins, key=lambda r: (r.flow_tv, -r.tau))
    else:
        def margin(r):
            z = model.forward(r.image[None]).data[0]
            return float(margin_loss(z, cfg).data)

        chosen = min(runs, key=margin)
    if len(grid) > 1:
        chosen.info["tau_grid"] = grid
        chosen.info["grid_successes"] = [r.tau for r in wins]
        chosen.wall_ms = (time.perf_counter() - started) * 1000.0
    return chosen


def adaptive_blur_attack(model, x, cfg, solver_cfg=None, kernel=3):
    """stAdv against ``blur -> model``: the defence is part of what is attacked."""
    from .defenses import BlurDefended

    composite = model if isinstance(model, BlurDefended) else BlurDefended(model, kernel)
    outcome = stadv_attack(composite, x, cfg, solver_cfg)
    outcome.method = "stadv-adaptive"
    return outcome


# --- pixel-space attacks -------------------------------------------------------


def input_gradient(model, xs, labels, targeted=False):
    """Gradient of the summed cross-entropy w.r.t. a batch of images.

    With ``targeted=True`` the sign is flipped so that ascending the returned
    gradient descends the target-class loss.
    """
    xt = Tensor(np.asarray(xs, dtype=np.float64), requires_grad=True)
    loss = T.cross_entropy(model.forward(xt), np.asarray(labels), reduction="sum")
    loss.backward()
    return -xt.grad if targeted else xt.grad


def fgsm_perturb(model, xs, labels, epsilon, targeted=False):
    """Batched single signed-gradient step, clipped to the pixel range."""
    lo, hi = model.pixel_range
    xs = np.asarray(xs, dtype=np.float64)
    if epsilon == 0:
        return xs.copy()
    g = input_gradient(model, xs, labels, targeted)
    return np.clip(xs + epsilon * np.sign(g), lo, hi)


def fgsm_attack(model, x, y_true, epsilon, target=None):
    """Single-step L-inf attack; untargeted ascends the true-class loss."""
    started = time.perf_counter()
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    label = y_true if target is None else target
    adv = fgsm_perturb(model, x[None], [label], epsilon, targeted=target is not None)[0]
    outcome = AttackOutcome("fgsm", adv, False, int(y_true), target, info={"epsilon": epsilon})
    return _finish(outcome, model, started)


def pgd_perturb(model, xs, labels, epsilon, steps, step_size, rng=None, random_start=True, targeted=False):
    """Batched projected signed-gradient ascent inside the L-inf ball."""
    lo, hi = model.pixel_range
    xs = np.asarray(xs, dtype=np.float64)
    if epsilon == 0:
        return xs.copy()
    low, high = np.maximum(xs - epsilon, lo), np.minimum(xs + epsilon, hi)
    adv = xs.copy()
    if random_start:
        rng = rng if rng is not None else np.random.default_rng(0)
        adv = np.clip(xs + rng.uniform(-epsilon, epsilon, size=xs.shape), low, high)
    for _ in range(steps):
        g = input_gradient(model, adv, labels, targeted)
        adv = np.clip(adv + step_size * np.sign(g), low, high)
    return adv


def pgd_attack(model, x, y_true, epsilon, steps=10, step_size=None, rng=None, random_start=True, target=None):
    started = time.perf_counter()
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    step_size = epsilon / 4 if step_size is None else step_size
    x = np.asarray(x, dtype=np.float64)
    label = y_true if target is None else target
    adv = pgd_perturb(
        model, x[None], [label], epsilon, steps, step_size, rng, random_start, target is not None
    )[0]
    info = {"epsilon": epsilon, "steps": steps, "step_size": step_size}
    return _finish(AttackOutcome("pgd", adv, False, int(y_true), target, info=info), model, started)


def cw_attack(
    model,
    x,
    target=None,
    kappa=0.0,
    c_weight=1.0,
    steps=100,
    y_true=None,
    search_rounds=5,
    epsilon=None,
    solver_cfg=None,
):
    """Margin-loss attack with an L2 penalty, solved by L-BFGS in tanh space.

    Minimises ``||delta||^2 + c * margin(model(x + delta))``. The image is
    parameterised as ``a + (b - a) * (tanh(w) + 1) / 2`` where ``[a, b]`` is the
    pixel range, intersected with ``[x - epsilon, x + epsilon]`` when an L-inf
    budget is given. ``c`` starts at ``c_weight`` and is binary searched over
    ``search_rounds`` rounds (x10 while no upper bound is known). The
    successful result with the smallest ``||delta||_2`` is returned.

    ``target=None`` runs the untargeted variant and needs ``y_true``.
    """
    started = time.perf_counter()
    x = np.asarray(x, dtype=np.float64)
    y_true = int(predict(model, x)) if y_true is None else int(y_true)
    cfg = AttackObjectiveConfig(true_class=y_true, target_class=target, tau=0.0, kappa=kappa)
    lo, hi = model.pixel_range
    a, b = np.full_like(x, lo), np.full_like(x, hi)
    if epsilon is not None:
        a, b = np.maximum(a, x - epsilon), np.minimum(b, x + epsilon)
    span = np.maximum(b - a, 1e-12)

    def to_image(w):
        return a + span * (np.tanh(w) + 1.0) / 2.0

    rel = np.clip(2.0 * (x - a) / span - 1.0, -1 + 1e-6, 1 - 1e-6)
    w0 = np.arctanh(rel)
    solver_cfg = solver_cfg or LbfgsConfig(max_iterations=steps)

    best = {"l2": math.inf, "image": None}
    if goal_met(predict(model, x), y_true, target):
        best = {"l2": 0.0, "image": x.copy()}

    def run(c):
        hit = {"l2": math.inf, "image": None}

        def fun(vec):
            wt = Tensor(vec.reshape(x.shape), requires_grad=True)
            img = T.as_tensor(a) + T.as_tensor(span) * ((T.tanh(wt) + 1.0) * 0.5)
            delta = img - x
            dist = (delta * delta).sum()
            logits = model.forward(img.reshape((1,) + x.shape)).reshape(-1)
            obj = dist + margin_loss(logits, cfg) * c
            if goal_met(int(np.argmax(logits.data)), y_true, target) and dist.data < hit["l2"]:
                hit["l2"], hit["image"] = float(dist.data), img.data.copy()

            def grad_fn():
                obj.backward()
                return wt.grad

            return float(obj.data), grad_fn

        try:
            lbfgs_minimize(fun, w0.reshape(-1), solver_cfg)
        except NonFiniteObjective:
            pass
        return hit

    c, c_lo, c_hi = float(c_weight), 0.0, math.inf
    history = []
    for _ in range(search_rounds):
        hit = run(c)
        ok = hit["image"] is not None
        history.append((c, ok))
        if ok:
            if hit["l2"] < best["l2"]:
                best = hit
            c_hi = c
            c = (c_lo + c_hi) / 2
        else:
            c_lo = c
            c = c * 10 if math.isinf(c_hi) else (c_lo + c_hi) / 2

    image = best["image"] if best["image"] is not None else to_image(w0)
    if best["image"] is None:
        image = np.clip(image, a, b)
    delta = image - x
    info = {
        "l2": float(np.sqrt(np.sum(delta**2))),
        "linf": float(np.max(np.abs(delta))),
        "c_history": history,
        "epsilon": epsilon,
    }
    outcome = AttackOutcome("cw", image, False, y_true, target, info=info)
    return _finish(outcome, model, started)
