"""
A toy detector and the scenes it is tested on.

Each toy detector slides four random, zero-mean 15x15 templates over the image
with stride 8 and turns the correlation into a confidence with a sigmoid.
Scenes plant the sum of both detectors' templates, so both fire on every object.
"""

import numpy as np

from keypatch.detector import attack_loss
from keypatch.scenes import default_detectors, make_scene

detectors = default_detectors()
image, truth = make_scene(detectors, seed=7)
print(f"scene {image.id}: {image.pixels.shape}, {len(truth)} planted objects")

for det in detectors:
    found = det.detect(image.pixels)
    conf = det.confidence_map(image.pixels)
    print(f"  {det.id}: {len(found)} boxes, confidences {[round(d.confidence, 3) for d in found]}")
    print(f"         background max {np.sort(conf.ravel())[-len(found) - 1]:.3f}")
    print(f"         loss {attack_loss([d.confidence for d in found]):.4f}")

# the gradient is analytic; a central difference at one pixel agrees
det = detectors[0]
g = det.loss_gradient(image.pixels)
y, x, ch = (int(v) for v in np.unravel_index(np.argmax(np.abs(g)), g.shape))
step = 1e-4
plus, minus = image.pixels.copy(), image.pixels.copy()
plus[y, x, ch] += step
minus[y, x, ch] -= step
sel = det.confidence_map(image.pixels) >= det.threshold
numeric = (det.loss_and_gradient(plus, selection=sel)[0] - det.loss_and_gradient(minus, selection=sel)[0]) / (2 * step)
print(f"dJ/dx at {(y, x, ch)}: analytic {g[y, x, ch]:.6e}, numeric {numeric:.6e}")
