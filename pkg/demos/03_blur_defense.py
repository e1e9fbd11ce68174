"""Does a 3x3 mean blur undo the attacks? And what if the attacker knows about it?

Uses the weights written by 02_attack_mnist.py.

    python demos/03_blur_defense.py [n_digits]
"""

import sys
from pathlib import Path

import numpy as np

from stadv import (
    AttackObjectiveConfig,
    adaptive_blur_attack,
    build_model,
    cw_attack,
    evaluate_defense,
    load_mnist,
    predict,
    stadv_attack,
)
from stadv._alloc import keep_heap
from stadv.persist import load_weights

keep_heap()
n_digits = int(sys.argv[1]) if len(sys.argv) > 1 else 10
base = Path("demo_out/attack_mnist")
model = build_model("A")
load_weights(model, base / "A.w")
test_set = load_mnist(base / "data", "test")

rng = np.random.default_rng(1)
picked = [i for i in range(len(test_set)) if predict(model, test_set.images[i]) == test_set.labels[i]][:n_digits]
labels = [int(test_set.labels[i]) for i in picked]
targets = [int(rng.choice([c for c in range(10) if c != y])) for y in labels]

outcomes = []
for i, y, t in zip(picked, labels, targets):
    x = test_set.images[i]
    cfg = AttackObjectiveConfig(true_class=y, target_class=t, tau=0.05)
    outcomes.append(stadv_attack(model, x, cfg))
    outcomes.append(cw_attack(model, x, target=t, y_true=y))
    # the adaptive attack optimises through the blur, so its success is already "after defence"
    outcomes.append(adaptive_blur_attack(model, x, cfg))
    print(f"digit {i} done", flush=True)

for defense in ("none", "blur"):
    rep = evaluate_defense(model, defense, outcomes, [y for y in labels for _ in range(3)])
    print(f"\n{defense}:")
    for method in ("stadv", "cw", "stadv-adaptive"):
        print(f"  {method:15s} success {rep.success_rates[method]:.2f}  "
              f"recovered accuracy {rep.recovered_accuracy[method]:.2f}")
