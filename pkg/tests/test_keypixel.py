import numpy as np
import pytest

from keypatch import keypixel
from keypatch.types import Detection


def test_accumulate_heatmap_examples():
    heat = np.zeros((4, 4))
    assert np.array_equal(keypixel.accumulate_heatmap(heat, np.zeros((4, 4, 3))), heat)
    g = np.zeros((4, 4, 3))
    g[1, 2] = (1.0, -1.0, 2.0)
    out = keypixel.accumulate_heatmap(heat, g)
    assert out[1, 2] == 4.0 and out.sum() == 4.0
    rng = np.random.default_rng(0)
    g1, g2 = rng.standard_normal((2, 4, 4, 3))
    a = keypixel.accumulate_heatmap(keypixel.accumulate_heatmap(heat, g1), g2)
    b = keypixel.accumulate_heatmap(keypixel.accumulate_heatmap(heat, g2), g1)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        keypixel.accumulate_heatmap(heat, np.zeros((4, 5, 3)))


def test_score_cells_tiling():
    heat = np.ones((300, 300))
    cells = keypixel.score_cells(heat, [Detection((0, 0, 140, 140), 0.9)], 70)
    assert [c for c, _ in cells] == [(0, 0, 70, 70), (70, 0, 140, 70), (0, 70, 70, 140), (70, 70, 140, 140)]
    cells = keypixel.score_cells(heat, [Detection((10, 20, 110, 90), 0.9)], 70)
    assert cells == [((10, 20, 80, 90), 4900.0), ((80, 20, 110, 90), 2100.0)]
    assert keypixel.score_cells(heat, [], 70) == []


def test_score_cells_matches_direct_sums():
    rng = np.random.default_rng(3)
    heat = rng.random((50, 60))
    for cell, score in keypixel.score_cells(heat, [Detection((3, 4, 41, 47), 0.9)], 9):
        x0, y0, x1, y1 = cell
        assert score == pytest.approx(heat[y0:y1, x0:x1].sum(), rel=1e-12)


def test_score_cells_drops_repeated_cells():
    heat = np.ones((50, 50))
    boxes = [Detection((0, 0, 15, 15), 0.9, 0, "a"), Detection((0, 0, 15, 15), 0.9, 0, "b")]
    assert len(keypixel.score_cells(heat, boxes, 70)) == 1


def test_select_top_k_examples():
    cells = [((0, 0, 1, 1), 1.0), ((5, 0, 6, 1), 2.0), ((0, 5, 1, 6), 3.0)]
    assert len(keypixel.select_top_k(cells, 5)) == 3
    cells = [((0, 0, 1, 1), 9.0), ((30, 20, 31, 21), 7.0), ((40, 10, 41, 11), 7.0), ((2, 2, 3, 3), 1.0)]
    assert keypixel.select_top_k(cells, 2) == [(0, 0, 1, 1), (40, 10, 41, 11)]
    flat = [((x, y, x + 1, y + 1), 1.0) for y in (5, 0) for x in (3, 1)]
    assert keypixel.select_top_k(flat, 3) == [(1, 0, 2, 1), (3, 0, 4, 1), (1, 5, 2, 6)]


def _brute_grid(w, h, s):
    """Grid lines drawn one pixel at a time."""
    mask = np.zeros((h, w), bool)
    for y in range(h):
        for x in range(w):
            if y % s == 0 or y == h - 1 or x % s == 0 or x == w - 1:
                mask[y, x] = True
    return mask


def test_render_grid_examples():
    mask = keypixel.render_grid([(0, 0, 70, 70)], 5, (70, 70))
    assert mask.sum() == 15 * 70 + 15 * 70 - 15 * 15 == 1875
    assert np.array_equal(mask, _brute_grid(70, 70, 5))
    border = keypixel.render_grid([(2, 3, 12, 9)], 20, (20, 20))
    expected = np.zeros((20, 20), bool)
    expected[3:9, 2:12] = True
    expected[4:8, 3:11] = False
    assert np.array_equal(border, expected)
    a = keypixel.render_grid([(0, 0, 10, 10)], 3, (40, 40))
    b = keypixel.render_grid([(20, 20, 35, 32)], 3, (40, 40))
    both = keypixel.render_grid([(0, 0, 10, 10), (20, 20, 35, 32)], 3, (40, 40))
    assert np.array_equal(both, a | b) and both.sum() == a.sum() + b.sum()


def test_render_grid_count_formula_on_random_cells():
    rng = np.random.default_rng(7)
    for _ in range(50):
        w, h, s = int(rng.integers(2, 40)), int(rng.integers(2, 40)), int(rng.integers(2, 12))
        mask = keypixel.render_grid([(0, 0, w, h)], s, (h, w))
        lines_h = len(set(range(0, h, s)) | {h - 1})
        lines_v = len(set(range(0, w, s)) | {w - 1})
        assert mask.sum() == lines_h * w + lines_v * h - lines_h * lines_v
        assert np.array_equal(mask, _brute_grid(w, h, s))


def test_random_mask_examples():
    m = keypixel.baseline_random_mask((100, 100), 0.02, seed=4)
    assert m.sum() == 200
    assert np.array_equal(m, keypixel.baseline_random_mask((100, 100), 0.02, seed=4))
    assert keypixel.baseline_random_mask((10, 7), 1.0, seed=0).all()
    with pytest.raises(ValueError):
        keypixel.baseline_random_mask((10, 10), 0.0, seed=0)


def test_center_mask_examples():
    m = keypixel.baseline_center_mask([Detection((40, 40, 60, 60), 0.9)], 10, (100, 100))
    rows, cols = np.nonzero(m)
    assert (rows.min(), rows.max(), cols.min(), cols.max()) == (45, 54, 45, 54)
    assert m.sum() == 100
    corner = keypixel.baseline_center_mask([Detection((0, 0, 4, 4), 0.9)], 10, (100, 100))
    assert 0 < corner.sum() < 100
    assert not keypixel.baseline_center_mask([], 10, (20, 20)).any()


def test_gradient_mask_picks_hottest_cells():
    heat = np.zeros((200, 200))
    heat[150:160, 20:30] = 5.0
    heat[10:20, 10:20] = 1.0
    boxes = [Detection((0, 0, 200, 200), 0.9)]
    mask, cells = keypixel.gradient_mask(heat, boxes, 50, 2, 5)
    assert cells == [(0, 150, 50, 200), (0, 0, 50, 50)]
    assert np.array_equal(mask, keypixel.render_grid(cells, 5, (200, 200)))
