"""Train Model A on a small MNIST split and fool it with smooth flow fields.

Needs mlxtend for its bundled 5000-digit MNIST sample. Training takes about
two minutes on one core; each attacked digit a few seconds.

    python demos/02_attack_mnist.py [n_digits]
"""

import sys
import time
from pathlib import Path

import numpy as np

from stadv import AttackObjectiveConfig, TrainConfig, build_model, load_mnist, predict, stadv_attack, train
from stadv._alloc import keep_heap
from stadv.datasets import write_mnist_subset
from stadv.persist import export_flow_svg, export_image, save_weights

keep_heap()
n_digits = int(sys.argv[1]) if len(sys.argv) > 1 else 5
out = Path("demo_out/attack_mnist")
out.mkdir(parents=True, exist_ok=True)

write_mnist_subset(out / "data", 2000, 1000)
train_set, test_set = load_mnist(out / "data", "train"), load_mnist(out / "data", "test")
print("train", train_set.images.shape, "test", test_set.images.shape)

model = build_model("A")
print(model.summary())
t0 = time.perf_counter()
report = train(model, train_set, TrainConfig(epochs=5), test_set)
print(f"epoch losses {np.round(report.epoch_losses, 3)}; test accuracy {report.test_accuracy:.3f}; "
      f"{time.perf_counter() - t0:.0f}s")
save_weights(model, out / "A.w")

rng = np.random.default_rng(0)
hits = 0
shown = 0
for i in range(len(test_set)):
    if shown == n_digits:
        break
    x, y = test_set.images[i], int(test_set.labels[i])
    if predict(model, x) != y:
        continue  # only attack digits the model gets right
    target = int(rng.choice([c for c in range(10) if c != y]))
    res = stadv_attack(model, x, AttackObjectiveConfig(true_class=y, target_class=target, tau=0.05))
    shown += 1
    hits += res.success
    print(f"digit {i}: {y} -> {res.prediction} (target {target}) success={res.success} "
          f"TV {res.flow_tv:.2e} L2 {res.flow_l2:.2e} max |flow| {np.abs(res.flow).max():.2f}px")
    # benign and adversarial side by side, plus the flow drawn over the digit
    export_image(np.concatenate([x, np.ones((28, 1, 1)), res.image], axis=1), out / f"{i:04d}_pair.pgm")
    export_flow_svg(res.flow, x, out / f"{i:04d}_flow.svg")

print(f"{hits}/{shown} targeted attacks succeeded; images in {out}")
