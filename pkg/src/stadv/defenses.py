"""Mean-blur input restoration and the defence evaluation harness."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attacks import goal_met
from .models import predict

__all__ = ["mean_blur_restore", "BlurDefended", "DefenseReport", "evaluate_defense", "DEFENSES"]

DEFENSES = ("none", "blur", "advtrain-fgsm", "advtrain-ens", "advtrain-pgd")


def _blur_nhwc(x, kernel):
    """Same-size k×k mean filter with edge replication on an (N,H,W,C) tensor."""
    nchw = T.as_tensor(x).transpose(0, 3, 1, 2)
    return T.avgpool2d(nchw, kernel, same=True).transpose(0, 2, 3, 1)


def mean_blur_restore(x, kernel=3):
    """3×3 (by default) stride-1 mean filter applied per channel.

    Accepts (H,W), (H,W,C) or (N,H,W,C); the output has the input's shape.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return _blur_nhwc(x[None, :, :, None], kernel).data[0, :, :, 0]
    if x.ndim == 3:
        return _blur_nhwc(x[None], kernel).data[0]
    return _blur_nhwc(x, kernel).data


class BlurDefended:
    """``model`` preceded by the mean filter, as one differentiable classifier."""

    def __init__(self, model, kernel=3):
        self.model = model
        self.kernel = kernel
        self.input_shape = model.input_shape
        self.num_classes = model.num_classes
        self.pixel_range = model.pixel_range
        self.name = f"{model.name}+blur{kernel}"

    def forward(self, x, train=False, rng=None, params=None):
        return self.model.forward(_blur_nhwc(x, self.kernel), train=train, rng=rng, params=params)

    def logits(self, x, mode="eval", rng=None):
        x = np.asarray(x, dtype=np.float64)
        return self.model.logits(mean_blur_restore(x, self.kernel), mode, rng)


@dataclass
class DefenseReport:
    defense: str
    model: str
    success_rates: dict = field(default_factory=dict)
    recovered_accuracy: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    seed: int = 0
    notes: str = ""

    @property
    def sample_count(self):
        return sum(self.counts.values())

    def to_record(self):
        return {
            "defense": self.defense,
            "model": self.model,
            "success_rates": self.success_rates,
            "recovered_accuracy": self.recovered_accuracy,
            "counts": self.counts,
            "seed": self.seed,
            "notes": self.notes,
        }


def evaluate_defense(model, defense, outcomes, true_labels, seed=0):
    """Re-classify stored adversarial images behind ``defense`` ("none" or "blur").

    Per attack method: the fraction of images still meeting their attack goal
    and the fraction classified as their true label (recovered accuracy).
    With ``defense="none"`` the success rates are the stored outcome flags.
    """
    true_labels = list(true_labels)
    if len(outcomes) != len(true_labels):
        raise ValueError(
            f"evaluate_defense: {len(outcomes)} outcomes but {len(true_labels)} labels"
        )
    if defense not in ("none", "blur"):
        raise ValueError(f"evaluate_defense handles input defences 'none' and 'blur', got {defense!r}")
    report = DefenseReport(defense, getattr(model, "name", "?"), seed=seed)
    by_method = {}
    for out, y in zip(outcomes, true_labels):
        by_method.setdefault(out.method, []).append((out, int(y)))
    for method, items in by_method.items():
        if defense == "none":
            flags = [bool(o.success) for o, _ in items]
            preds = [o.prediction if o.prediction >= 0 else predict(model, o.image) for o, _ in items]
        else:
            imgs = mean_blur_restore(np.stack([o.image for o, _ in items]))
            preds = list(predict(model, imgs))
            flags = [goal_met(int(p), y, o.target) for p, (o, y) in zip(preds, items)]
        report.success_rates[method] = float(np.mean(flags))
        report.recovered_accuracy[method] = float(
            np.mean([int(p) == y for p, (_, y) in zip(preds, items)])
        )
        report.counts[method] = len(items)
    return report
