"""
Patch adding under a region budget.

With one key cell the initial mask cannot cover every object, so the engine
adds patches. A region limit keeps the mask to a few connected pieces by
moving each new patch until it touches the existing ones.
"""

from keypatch.engine import count_regions, run_attack
from keypatch.scenes import default_detectors, make_scene
from keypatch.types import AttackConfig

detectors = default_detectors()
image, truth = make_scene(detectors, seed=11, n_objects=(4, 4))

for limit in (None, 3):
    config = AttackConfig(max_iterations=600, top_k_cells=1, region_limit=limit)
    result = run_attack(image, detectors, config)
    print(f"region_limit={limit}: patches {result.patch_count} (skipped {result.skipped_patches}), "
          f"regions after each add {result.regions_after_add}, final regions {count_regions(result.mask)}, "
          f"final counts {result.adv_counts}")
