"""Minibatch training, optionally mixing in adversarial examples.

Adversarial modes replace half of every batch with perturbed copies:
``fgsm`` against the current weights, ``ensemble`` against fixed source
models taken round-robin, ``pgd`` with :func:`stadv.attacks.pgd_perturb`
against the current weights.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .attacks import fgsm_perturb, pgd_perturb
from .models import predict
from .tensor import Tensor

__all__ = ["TrainConfig", "TrainReport", "train", "accuracy", "ADV_MODES"]

log = logging.getLogger(__name__)

ADV_MODES = ("none", "fgsm", "ensemble", "pgd")


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    seed: int = 0
    adversarial_mode: str = "none"
    epsilon: float = 0.3
    pgd_steps: int = 10
    pgd_step_size: float = 0.1
    ensemble_source_models: list = field(default_factory=list)

    def __post_init__(self):
        if self.adversarial_mode not in ADV_MODES:
            raise ValueError(f"adversarial_mode must be one of {ADV_MODES}, got {self.adversarial_mode!r}")
        if self.optimizer not in ("adam", "sgd-momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.adversarial_mode == "pgd" and self.pgd_steps < 1:
            raise ValueError("pgd_steps must be >= 1 for pgd training")
        if self.adversarial_mode == "ensemble" and not self.ensemble_source_models:
            raise ValueError("ensemble training needs at least one source model")

    def to_record(self):
        rec = asdict(self)
        rec["ensemble_source_models"] = [getattr(m, "name", str(m)) for m in self.ensemble_source_models]
        return rec


@dataclass
class TrainReport:
    epoch_losses: list
    test_accuracy: float
    wall_time: float
    seed: int
    config: dict = field(default_factory=dict)

    @property
    def epochs(self):
        return len(self.epoch_losses)

    def to_record(self):
        return asdict(self)


def accuracy(model, images, labels):
    if len(images) == 0:
        return 0.0
    return float(np.mean(predict(model, images) == np.asarray(labels)))


class _Adam:
    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, weights, grads):
        self.t += 1
        for k, g in grads.items():
            m = self.m.get(k, 0.0) * self.b1 + (1 - self.b1) * g
            v = self.v.get(k, 0.0) * self.b2 + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            weights[k] = weights[k] - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class _Momentum:
    def __init__(self, lr, momentum):
        self.lr, self.mu, self.vel = lr, momentum, {}

    def step(self, weights, grads):
        for k, g in grads.items():
            v = self.vel.get(k, 0.0) * self.mu - self.lr * g
            self.vel[k] = v
            weights[k] = weights[k] + v


def _adversarial_half(model, xb, yb, cfg, rng, batch_index):
    mode = cfg.adversarial_mode
    if mode == "fgsm":
        return fgsm_perturb(model, xb, yb, cfg.epsilon)
    if mode == "ensemble":
        src = cfg.ensemble_source_models[batch_index % len(cfg.ensemble_source_models)]
        return fgsm_perturb(src, xb, yb, cfg.epsilon)
    return pgd_perturb(model, xb, yb, cfg.epsilon, cfg.pgd_steps, cfg.pgd_step_size, rng=rng)


def train(model, data, cfg, test_data=None):
    """Fit ``model.weights`` in place on ``data``; returns a :class:`TrainReport`.

    ``data`` and ``test_data`` are :class:`stadv.datasets.Dataset` objects (or
    anything with ``images`` (N,H,W,C) and ``labels``). Training is fully
    determined by ``cfg.seed``.
    """
    images, labels = np.asarray(data.images, dtype=np.float64), np.asarray(data.labels)
    if len(images) == 0:
        raise ValueError("cannot train on an empty dataset")
    if tuple(images.shape[1:]) != tuple(model.input_shape):
        raise T.ShapeError(f"{model.name} training data", images.shape)
    started = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    opt = _Adam(cfg.learning_rate) if cfg.optimizer == "adam" else _Momentum(cfg.learning_rate, cfg.momentum)
    adversarial = cfg.adversarial_mode != "none"

    epoch_losses = []
    batch_index = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(images))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = images[idx], labels[idx]
            if adversarial:
                half = len(idx) // 2
                if half:
                    xb = xb.copy()
                    xb[half:] = _adversarial_half(model, xb[half:], yb[half:], cfg, rng, batch_index)
            params = {k: Tensor(v, requires_grad=True) for k, v in model.weights.items()}
            loss = T.cross_entropy(model.forward(xb, train=True, rng=rng, params=params), yb)
            loss.backward()
            opt.step(model.weights, {k: p.grad for k, p in params.items()})
            losses.append(float(loss.data))
            batch_index += 1
        epoch_losses.append(float(np.mean(losses)))
        log.info("%s epoch %d/%d loss %.4f", model.name, epoch + 1, cfg.epochs, epoch_losses[-1])

    acc = float("nan")
    if test_data is not None:
        acc = accuracy(model, test_data.images, test_data.labels)
    return TrainReport(epoch_losses, acc, time.perf_counter() - started, cfg.seed, cfg.to_record())
