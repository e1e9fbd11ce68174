"""Warping an image with a flow field, and measuring how much the flow bends it.

Runs in a second or two; writes a few PGM/SVG files to ./demo_out/flow_basics.
"""

from pathlib import Path

import numpy as np

from stadv import flow_l2_metric, flow_loss, flow_tv_metric, warp_image
from stadv.persist import export_flow_svg, export_image
from stadv.warp import to_grid_units

out = Path("demo_out/flow_basics")
out.mkdir(parents=True, exist_ok=True)

# a thick ring, roughly digit sized
u, v = np.mgrid[0:28, 0:28]
r = np.hypot(u - 13.5, v - 13.5)
ring = np.clip(1.5 - np.abs(r - 8) / 1.5, 0, 1)[..., None]

# zero flow leaves the image alone, bit for bit
same = warp_image(ring, np.zeros((28, 28, 2)))
print("zero flow is identity:", np.array_equal(same, ring))

# a smooth swirl: every pixel reads from a point rotated about the centre
angle = 0.15 * np.exp(-((r - 8) ** 2) / 20)
du = (u - 13.5) * (np.cos(angle) - 1) - (v - 13.5) * np.sin(angle)
dv = (u - 13.5) * np.sin(angle) + (v - 13.5) * (np.cos(angle) - 1)
swirl = np.stack([du, dv], axis=-1)
bent = warp_image(ring, swirl)

# a noisy flow of similar size moves pixels about as far but is far less smooth
rng = np.random.default_rng(0)
noise = rng.normal(scale=np.abs(swirl).mean() * 1.25, size=swirl.shape)

for name, f in (("swirl", swirl), ("noise", noise)):
    g = to_grid_units(f)
    print(
        f"{name:6s} flow loss {float(flow_loss(g).data):8.3f}  "
        f"TV {flow_tv_metric(g):.2e}  L2 {flow_l2_metric(g):.2e}  (grid units)"
    )

# warping only ever interpolates, so values stay inside the input range
print("warped range:", bent.min().round(4), bent.max().round(4))

export_image(ring, out / "ring.pgm")
export_image(bent, out / "ring_swirled.pgm")
export_image(warp_image(ring, noise), out / "ring_noisy.pgm")
export_flow_svg(swirl, ring, out / "swirl.svg", stride=2)
print("wrote", sorted(p.name for p in out.iterdir()))
