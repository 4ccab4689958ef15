import numpy as np
import pytest

from keypatch import engine, keypixel
from keypatch.detector import NoDetectionsError, ToyDetector
from keypatch.engine import (
    add_patch,
    algorithm1_loop,
    balance_weight,
    count_all,
    count_regions,
    decrease_perturbation,
    ensemble_step,
    points_removal,
    run_attack,
    warmup_attack,
)
from keypatch.scenes import make_scene, plant_pattern
from keypatch.types import AttackConfig, PerturbationState

from conftest import FixedCountDetector, ScriptedDetector


def test_count_regions_examples():
    assert count_regions(np.zeros((5, 5), bool)) == 0
    diag = np.zeros((5, 5), bool)
    diag[1, 1] = diag[2, 2] = True
    assert count_regions(diag) == 1
    cells = [(0, 0, 10, 10), (20, 0, 30, 10), (0, 20, 10, 30), (20, 20, 30, 30)]
    assert count_regions(keypixel.render_grid(cells, 3, (40, 40))) == 4


def test_balance_weight_examples():
    assert balance_weight(3, 5) == 1
    assert balance_weight(8, 5) == 3
    assert balance_weight(6, 5) == 1


def _state(shape=(16, 16), mask=None, counts=None):
    pixels = np.full((*shape, 3), 0.5)
    if mask is None:
        mask = np.zeros(shape, bool)
        mask[4:8, 4:8] = True
    return pixels, PerturbationState(adversarial=pixels, mask=mask, counts=counts)


def test_ensemble_step_gates_and_weights():
    original, state = _state(counts={"a": 8, "b": 2})
    dets = [FixedCountDetector(8, "a", 1.0), FixedCountDetector(2, "b", -1.0)]
    cfg = AttackConfig(alpha=0.01)
    out = ensemble_step(state, original, dets, cfg, {"a": 5, "b": 5})
    assert out.extra["weights"] == {"a": 3, "b": 1}
    assert out.iteration == 1 and out.counts is None
    delta = out.adversarial - original
    np.testing.assert_allclose(delta[state.mask], 0.02)
    assert np.all(delta[~state.mask] == 0.0)


def test_ensemble_step_skips_silent_detectors():
    original, state = _state(counts={"a": 0, "b": 1})
    dets = [FixedCountDetector(0, "a"), FixedCountDetector(1, "b")]
    out = ensemble_step(state, original, dets, AttackConfig(), {"a": 1, "b": 1})
    assert set(out.extra["weights"]) == {"b"}
    _, silent = _state(counts={"a": 0})
    with pytest.raises(NoDetectionsError):
        ensemble_step(silent, original, [FixedCountDetector(0, "a")], AttackConfig(), {"a": 1})


def test_warmup_heatmap_stays_inside_boxes():
    det = ToyDetector(seed=6)
    pixels = np.full((64, 64, 3), 0.5)
    pixels[16:31, 24:39] += plant_pattern([det], 1)
    result = warmup_attack(pixels, [det], AttackConfig())
    assert result.cleared and result.iterations <= 200
    assert np.all(result.heatmap[:16] == 0) and np.all(result.heatmap[31:] == 0)
    assert np.all(result.heatmap[:, :24] == 0) and np.all(result.heatmap[:, 39:] == 0)
    assert result.heatmap.max() > 0


def test_warmup_heatmap_is_sum_of_step_gradients():
    det = ToyDetector(seed=6)
    pixels = np.full((48, 48, 3), 0.5)
    pixels[8:23, 8:23] += plant_pattern([det], 0)
    result = warmup_attack(pixels, [det], AttackConfig(alpha=1 / 255))
    adv, heat, mask = pixels, np.zeros((48, 48)), np.zeros((48, 48), bool)
    mask[8:23, 8:23] = True
    for _ in range(result.iterations):
        g = det.loss_gradient(adv)
        heat = heat + np.abs(g).sum(axis=2)
        adv = np.where(mask[..., None], np.clip(adv + (1 / 255) * np.sign(g), 0, 1), adv)
    np.testing.assert_allclose(result.heatmap, heat, rtol=1e-12)


def test_warmup_needs_detections():
    with pytest.raises(NoDetectionsError):
        warmup_attack(np.full((32, 32, 3), 0.5), [ToyDetector()], AttackConfig())
    with pytest.raises(ValueError):
        warmup_attack(np.full((32, 32, 3), 0.5), [], AttackConfig())


def test_decrease_perturbation_hand_example():
    original = np.zeros((1, 10, 3))
    adv = np.zeros((1, 10, 3))
    adv[0, :9] = 0.3
    state = PerturbationState(adversarial=adv, mask=np.ones((1, 10), bool))
    out = decrease_perturbation(state, original)
    assert out.mask.tolist() == [[True] * 9 + [False]]
    assert np.array_equal(out.adversarial[0, 9], original[0, 9])


def test_decrease_perturbation_uniform_and_reset():
    original = np.zeros((4, 4, 3))
    uniform = PerturbationState(adversarial=np.full((4, 4, 3), 0.2), mask=np.ones((4, 4), bool))
    assert decrease_perturbation(uniform, original).mask.all()
    rng = np.random.default_rng(0)
    adv = rng.random((4, 4, 3))
    out = decrease_perturbation(PerturbationState(adversarial=adv, mask=np.ones((4, 4), bool)), original)
    assert out.mask_bits <= 16
    assert np.array_equal(out.adversarial[~out.mask], original[~out.mask])


def test_decrease_keeps_pixels_not_yet_stepped():
    original = np.zeros((1, 10, 3))
    adv = np.zeros((1, 10, 3))
    adv[0, :5] = 0.3
    fresh = np.zeros((1, 10), bool)
    fresh[0, 5:] = True
    state = PerturbationState(adversarial=adv, mask=np.ones((1, 10), bool), extra={"fresh": fresh})
    assert decrease_perturbation(state, original).mask.all()


def _toy_instance(size=32):
    det = ToyDetector(seed=8)
    pixels = np.full((size, size, 3), 0.5)
    pixels[8:23, 8:23] += plant_pattern([det], 3)
    pixels = np.clip(pixels, 0, 1)
    mask = keypixel.render_grid([(8, 8, 23, 23)], 3, pixels.shape)
    state = algorithm1_loop(pixels, mask, [det], AttackConfig(max_iterations=30, alpha=4 / 255), refine=False)
    return det, pixels, state


def test_points_removal_leaves_no_single_removable_pixel():
    det, pixels, state = _toy_instance()
    before = sum(count_all([det], state.adversarial).values())
    out = points_removal(state, pixels, [det], block=1)
    after = sum(count_all([det], out.adversarial).values())
    assert after <= before
    assert out.mask_bits < state.mask_bits
    assert np.array_equal(out.adversarial[~out.mask], pixels[~out.mask])
    for y, x in zip(*np.nonzero(out.mask)):
        trial = out.adversarial.copy()
        trial[y, x] = pixels[y, x]
        assert sum(count_all([det], trial).values()) > after


def test_points_removal_drops_no_effect_pixels():
    det, pixels, state = _toy_instance()
    mask = state.mask.copy()
    mask[0, 0] = True  # far from the object and unchanged
    out = points_removal(state.replace(mask=mask), pixels, [det], block=1)
    assert not out.mask[0, 0]


def test_add_patch_centers_on_single_hot_pixel():
    mask = np.zeros((100, 100), bool)
    state = PerturbationState(adversarial=np.zeros((100, 100, 3)), mask=mask)
    heat = np.zeros((100, 100))
    heat[30, 40] = 1.0
    cfg = AttackConfig(patch_size=10)
    out = add_patch(state, heat, cfg)
    assert out.patch_count == 1
    assert out.extra["patches"] == [(35, 25, 45, 35)]
    assert np.array_equal(out.mask, keypixel.render_grid([(35, 25, 45, 35)], 5, (100, 100)))
    heat = np.zeros((100, 100))
    heat[0, 99] = 1.0
    corner = add_patch(state, heat, cfg)
    assert corner.extra["patches"] == [(94, 0, 100, 5)]


def test_add_patch_respects_region_limit():
    mask = np.zeros((120, 120), bool)
    for k in range(10):
        mask[5 + 11 * k, 5] = True
    state = PerturbationState(adversarial=np.zeros((120, 120, 3)), mask=mask)
    heat = np.zeros((120, 120))
    heat[60, 100] = 1.0
    cfg = AttackConfig(patch_size=9, region_limit=10)
    out = add_patch(state, heat, cfg)
    assert out.patch_count == 1
    assert count_regions(out.mask) <= 10
    assert out.extra["regions_after_add"] == [count_regions(out.mask)]
    assert np.all(out.mask[mask])


def test_add_patch_unsatisfiable_limit_is_skipped():
    mask = np.zeros((60, 60), bool)
    mask[0, 0] = mask[59, 59] = True
    state = PerturbationState(adversarial=np.zeros((60, 60, 3)), mask=mask)
    heat = np.zeros((60, 60))
    heat[30, 30] = 1.0
    out = add_patch(state, heat, AttackConfig(patch_size=5, region_limit=1))
    assert out.patch_count == 0 and out.skipped_patches == 1
    assert np.array_equal(out.mask, mask)


def test_loop_stops_adding_once_hidden():
    # N: 3 for 150 iterations, then 0
    det = ScriptedDetector([3] * 150 + [0])
    mask = np.zeros((64, 64), bool)
    mask[10:20, 10:20] = True
    cfg = AttackConfig(max_iterations=400, patch_size=8)
    trace = []
    state = algorithm1_loop(np.full((64, 64, 3), 0.5), mask, [det], cfg, {"scripted": 3}, trace=trace, return_best=False)
    assert state.patch_count == 1
    assert max(t["patch_count"] for t in trace if t["iteration"] > 150) == 1


def test_loop_never_exceeds_patch_budget():
    det = ScriptedDetector([4])
    mask = np.zeros((64, 64), bool)
    mask[30:34, 30:34] = True
    cfg = AttackConfig(max_iterations=700, patch_size=6, max_patches=2)
    state = algorithm1_loop(np.full((64, 64, 3), 0.5), mask, [det], cfg, {"scripted": 4}, return_best=False)
    assert state.patch_count == 2


def test_loop_keeps_unmasked_pixels_and_min_is_monotone(small_scene, toy_pair):
    image, _ = small_scene
    mask = keypixel.render_grid([(0, 0, 128, 128)], 9, (128, 128))
    trace = []
    state = algorithm1_loop(image, mask, toy_pair, AttackConfig(max_iterations=60, add_frequency=20), trace=trace)
    assert np.array_equal(state.adversarial[~state.mask], image.pixels[~state.mask])
    ns = [sum(t["n"].values()) for t in trace]
    running = np.minimum.accumulate(ns)
    assert all(a >= b for a, b in zip(running, running[1:]))


def test_run_attack_hides_small_scene(small_scene, toy_pair):
    image, _ = small_scene
    first = run_attack(image, toy_pair, AttackConfig(max_iterations=200))
    assert sum(first.adv_counts.values()) == 0
    assert sum(first.adv_counts.values()) <= sum(first.pre_removal_counts.values())
    assert np.array_equal(first.adversarial[~first.mask], image.pixels[~first.mask])
    assert [t["phase"] for t in first.trace][-2:] == ["points_removal", "done"]
    second = run_attack(image, toy_pair, AttackConfig(max_iterations=200))
    assert np.array_equal(first.adversarial, second.adversarial)
    assert np.array_equal(first.mask, second.mask)


def test_run_attack_rejects_empty_scene(toy_pair):
    with pytest.raises(NoDetectionsError):
        run_attack(np.full((64, 64, 3), 0.5), toy_pair)
    with pytest.raises(ValueError):
        run_attack(np.full((64, 64, 3), 0.5), [])


@pytest.mark.parametrize("init", engine.INIT_METHODS)
def test_initial_masks_fit_the_budget(small_scene, toy_pair, init):
    image, _ = small_scene
    dets = engine.detect_all(toy_pair, image.pixels)
    heat = np.ones(image.shape)
    mask, _ = engine.initial_mask(image.pixels, dets, AttackConfig(), init, heat, seed=1)
    assert mask.shape == image.shape and mask.any()
    if init != "gradient":
        assert mask.mean() <= 0.02
