import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import pixel_centers_in
from petmap import fusion, geometry, simulator
from petmap.errors import InvalidConfig
from petmap.fusion import FusionConfig, OverlapGrid
from petmap.geometry import RotatedRect
from petmap.sync import DetectionFrame, FrameGroup


def group_of(polys_per_cam, ts=1000):
    frames = tuple(DetectionFrame(c, ts, tuple(p)) for c, p in enumerate(polys_per_cam))
    return FrameGroup(frames, ts)


def grid_from_counts(counts, cfg=None):
    cfg = cfg or FusionConfig()
    return OverlapGrid(np.asarray(counts, dtype=np.uint8), cfg.score_table(), 1000, 4)


def box(x0, y0, x1, y1):
    return [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]


# -- scores and overlap grid --------------------------------------------------------


def test_point_values_exhaustive():
    assert [fusion.point_value(k) for k in range(5)] == [0, 1, 2, 6, 8]


def test_point_value_override_is_verbatim():
    cfg = FusionConfig(point_values={1: 0.5, 2: 3, 3: 7, 4: 9.25})
    grid = grid_from_counts(np.arange(5).reshape(1, 5), cfg)
    np.testing.assert_array_equal(grid.scores, [[0, 0.5, 3, 7, 9.25]])


def test_config_validation_and_round_trip():
    with pytest.raises(InvalidConfig):
        FusionConfig(high_overlap_min=1)
    with pytest.raises(InvalidConfig):
        FusionConfig(edge_margin_px=0)
    with pytest.raises(InvalidConfig):
        FusionConfig.from_dict({"no_such_key": 1})
    cfg = FusionConfig(split_area_px=9000)
    assert FusionConfig.from_dict(cfg.to_dict()) == cfg


def test_empty_group_gives_zero_grid():
    g = fusion.build_overlap_grid(group_of([[], [], [], []]), 50, 40)
    assert g.counts.shape == (40, 50)
    assert not g.counts.any() and not g.scores.any()


def test_four_cameras_same_square():
    sq = box(10, 10, 20, 20)
    g = fusion.build_overlap_grid(group_of([[sq]] * 4), 40, 40)
    assert (g.counts == 4).sum() == 100
    assert (g.scores == 8).sum() == 100
    assert g.counts.sum() == 400


def test_own_overlapping_polygons_count_once():
    g = fusion.build_overlap_grid(group_of([[box(0, 0, 10, 10), box(5, 5, 15, 15)]]), 20, 20)
    assert g.counts.max() == 1


def test_overlap_grid_matches_brute_force(rng):
    w, h = 48, 36
    polys = [[rng.uniform(-5, 50, (rng.integers(3, 7), 2)) for _ in range(2)] for _ in range(4)]
    g = fusion.build_overlap_grid(group_of(polys), w, h)
    expected = np.zeros((h, w), dtype=int)
    for cam in polys:
        union = np.zeros((h, w), dtype=bool)
        for p in cam:
            union |= pixel_centers_in(p, w, h)
        expected += union
    np.testing.assert_array_equal(g.counts, expected)


@given(st.integers(0, 2**31), st.permutations(range(4)))
def test_overlap_grid_permutation_invariant(seed, perm):
    rng = np.random.default_rng(seed)
    polys = [[rng.uniform(0, 60, (4, 2))] for _ in range(4)]
    a = fusion.build_overlap_grid(group_of(polys), 64, 64)
    b = fusion.build_overlap_grid(group_of([polys[k] for k in perm]), 64, 64)
    np.testing.assert_array_equal(a.counts, b.counts)


def test_high_overlap_mask():
    assert not fusion.high_overlap_mask(grid_from_counts(np.zeros((5, 5)))).any()
    counts = np.array([[2, 2, 3, 3, 4, 4, 0]])
    np.testing.assert_array_equal(
        fusion.high_overlap_mask(grid_from_counts(counts), 3), counts >= 3
    )


@given(st.integers(0, 2**31), st.integers(1, 4))
def test_high_overlap_mask_threshold(seed, k):
    counts = np.random.default_rng(seed).integers(0, 5, (20, 30))
    np.testing.assert_array_equal(fusion.high_overlap_mask(grid_from_counts(counts), k), counts >= k)


# -- rectangle fitting -------------------------------------------------------------------


def test_single_blob_rectangle():
    counts = np.zeros((100, 120))
    counts[30:50, 40:80] = 4
    # a 40x20 blob is below the default car-sized area floor
    cfg = FusionConfig(min_rect_area_px=500)
    (r,) = fusion.fit_rectangles(grid_from_counts(counts, cfg), cfg)
    assert r.rect.angle_deg == pytest.approx(0)
    assert (r.rect.width, r.rect.height) == pytest.approx((40, 20), abs=1.01)
    assert r.mean_score == pytest.approx(8, rel=0.1)
    covered = geometry.rasterize_polygon(r.corners, 120, 100)
    blob = counts == 4
    assert (covered & blob).sum() >= 0.95 * blob.sum()
    assert r.rect.area <= 1.10 * blob.sum()


def test_count_two_blob_is_ignored():
    counts = np.zeros((100, 200))
    counts[20:70, 30:160] = 2
    assert fusion.fit_rectangles(grid_from_counts(counts)) == []


def test_two_blobs_two_rectangles():
    counts = np.zeros((300, 400))
    counts[20:75, 30:170] = 4
    counts[150:205, 200:340] = 3
    rects = fusion.fit_rectangles(grid_from_counts(counts))
    assert len(rects) == 2
    centers = sorted((round(r.rect.cx), round(r.rect.cy)) for r in rects)
    assert centers == [(100, 48), (270, 178)]


def test_results_sorted_by_area_then_center():
    counts = np.zeros((300, 400))
    counts[200:255, 30:170] = 4
    counts[20:75, 30:170] = 4
    counts[100:170, 200:380] = 4
    rects = fusion.fit_rectangles(grid_from_counts(counts))
    keys = [(-r.rect.area, r.rect.cx, r.rect.cy) for r in rects]
    assert keys == sorted(keys)
    assert rects[1].rect.cy < rects[2].rect.cy


def test_low_mean_score_rejected():
    counts = np.zeros((200, 200))
    yy, xx = np.mgrid[0:200, 0:200]
    # thin diagonal band: its bounding rectangle is mostly empty
    counts[np.abs(xx - yy) < 3] = 3
    counts[:, :20] = 0
    assert fusion.fit_rectangles(grid_from_counts(counts)) == []


# -- safeguards ------------------------------------------------------------------------------


def test_snap_rule():
    cfg = FusionConfig(snap_angle_tol_deg=3)
    grid = grid_from_counts(np.zeros((400, 400)))
    r = RotatedRect(200, 200, 150, 60, 1.5)
    (out,) = fusion.apply_safeguards(r, grid, cfg)
    assert out.angle_deg == 0
    near90 = RotatedRect(200, 200, 150, 60, 88.0)
    (out,) = fusion.apply_safeguards(near90, grid, cfg)
    assert out.angle_deg == 90
    square = RotatedRect(200, 200, 80, 70, 2.0)
    (out,) = fusion.apply_safeguards(square, grid, cfg)
    assert out.angle_deg == 2.0


def test_small_interior_rect_unchanged():
    grid = grid_from_counts(np.zeros((400, 400)))
    r = RotatedRect(200, 200, 140, 55, 33.0)
    assert fusion.apply_safeguards(r, grid) == [r]


def test_edge_extension_toward_border():
    grid = grid_from_counts(np.zeros((400, 400)))
    r = RotatedRect(75, 200, 140, 55, 0.0)  # tail 5 px from the left edge
    (out,) = fusion.apply_safeguards(r, grid)
    assert out.width == pytest.approx(200)
    assert out.cx == pytest.approx(45)
    assert out.corners()[:, 0].max() == pytest.approx(145)
    # both ends near the border: no direction to infer
    both = RotatedRect(200, 200, 396, 55, 0.0)
    assert fusion.apply_safeguards(both, grid) == [both]


def _bridged_pair(gap=1):
    """Two 140x55 cars end to end with a small 3-camera bridge across the gap."""
    a = box(100, 200, 240, 255)
    b = box(240 + gap, 200, 380 + gap, 255)
    bridge = box(235, 225, 250, 230)
    polys = [[a, b, bridge], [a, b, bridge], [a, b, bridge], [a, b]]
    truth = [RotatedRect(170, 227.5, 140, 55, 0), RotatedRect(310 + gap, 227.5, 140, 55, 0)]
    return group_of(polys), truth


def test_split_merged_vehicles():
    group, truth = _bridged_pair()
    grid = fusion.build_overlap_grid(group, 600, 500)
    rects = fusion.fit_rectangles(grid)
    assert len(rects) == 2
    got = sorted(r.rect.center for r in rects)
    for (cx, cy), t in zip(got, truth):
        assert np.hypot(cx - t.cx, cy - t.cy) <= 10


def test_split_needs_a_valley():
    counts = np.zeros((400, 600))
    counts[100:200, 100:400] = 4
    grid = grid_from_counts(counts)
    (r,) = fusion.fit_rectangles(grid)
    assert r.rect.area > FusionConfig().split_area_px


def test_safeguards_idempotent_on_simulated_scenes():
    cfg = simulator.default_scenario(1)
    _, det = simulator.simulate(cfg)
    for k in range(0, 150, 7):
        group = group_of([[*det[c][k].polygons] for c in range(4)], det[0][k].timestamp_ms)
        grid = fusion.build_overlap_grid(group)
        for fr in fusion.fit_rectangles(grid):
            once = fr.rect
            assert fusion.apply_safeguards(once, grid) == [once]


def test_accepted_rectangles_have_dense_support():
    group, _ = _bridged_pair()
    grid = fusion.build_overlap_grid(group, 600, 500)
    for r in fusion.fit_rectangles(grid):
        assert fusion.mean_count_in(r.rect, grid) >= FusionConfig().high_overlap_min - 1


def test_fitted_rectangles_track_ground_truth():
    cfg = simulator.default_scenario(4)
    truth, det = simulator.simulate(cfg)
    margin = FusionConfig().edge_margin_px
    interior = border = 0
    for k, gt in enumerate(truth):
        if not gt.vehicles:
            continue
        group = group_of([[*det[c][k].polygons] for c in range(4)], gt.timestamp_ms)
        rects = [r.rect for r in fusion.fuse_group(group)]
        for v in gt.vehicles:
            c = v.rect.corners()
            if min(c.min(), 1600 - c.max()) > margin:
                best = max((geometry.rect_iou(v.rect, r) for r in rects), default=0.0)
                assert best >= 0.7
                interior += 1
            else:
                # extended toward the border on purpose; it must still cover the car
                inter = max(
                    abs(geometry.polygon_area(geometry.clip_convex(c, r.corners()))) for r in rects
                )
                assert inter >= 0.95 * v.rect.area
                border += 1
    assert interior > 50 and border >= 1
