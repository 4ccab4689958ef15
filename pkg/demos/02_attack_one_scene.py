"""
Hide every object in one scene from both detectors.

The run goes through the warm-up, picks key-pixel grids from the heatmap,
runs the masked attack and finally strips pixels the result does not need.
"""

import numpy as np

from keypatch.engine import count_regions, run_attack
from keypatch.metrics import image_score
from keypatch.scenes import default_detectors, make_scene
from keypatch.types import AttackConfig

detectors = default_detectors()
image, _ = make_scene(detectors, seed=3)
config = AttackConfig(max_iterations=300)

result = run_attack(image, detectors, config)
print("clean counts      ", result.clean_counts)
print("adversarial counts", result.adv_counts)
print(f"warm-up cleared after {result.warmup_iterations} iterations")
print(f"initial key-pixels {result.initial_mask_bits}, peak {result.peak_mask_bits}, "
      f"before points removal {result.pre_removal_mask_bits}, final {int(result.mask.sum())}")
print("chosen cells (x0, y0, x1, y1):", result.cells)

rate = float(result.mask.mean())
score = image_score(rate, config.p_limit, result.clean_counts, result.adv_counts, count_regions(result.mask))
print(f"p_rate {rate:.5f}  AS {score.as_j:.4f}  BS {score.bs_per_detector}  OS {score.os_j:.4f}  regions {score.regions}")

diff = np.abs(result.adversarial - image.pixels).max(axis=2)
print(f"largest change {diff.max() * 255:.0f}/255, mean change on mask {diff[result.mask].mean() * 255:.1f}/255")
