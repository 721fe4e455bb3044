import numpy as np
import pytest

from petmap import fusion, pet, simulator, sync
from petmap.errors import InvalidConfig
from petmap.geometry import RotatedRect
from petmap.simulator import GroundTruthFrame, GroundTruthVehicle, SimConfig, VehicleConfig


def straight_scenario(vehicles, **kw):
    base = simulator.default_scenario(0)
    return SimConfig(
        seed=kw.pop("seed", 0),
        duration_s=kw.pop("duration_s", 10.0),
        cameras=base.cameras,
        lanes=[simulator.LaneConfig("eb", [[0, 800], [1600, 800]])],
        vehicles=vehicles,
        **kw,
    )


def run_pipeline(detections, roi_grid=None):
    buf = sync.SyncBuffer()
    frames = sorted((f for fs in detections.values() for f in fs), key=lambda f: (f.timestamp_ms, f.camera_id))
    for f in frames:
        buf.ingest(f)
    grid = roi_grid or pet.PetGrid()
    groups = list(buf.drain())
    for g in groups:
        grid.update([r.rect for r in fusion.fuse_group(g)], g.group_timestamp_ms, collect_events=False)
    return grid, groups, buf


def test_zero_vehicles():
    cfg = straight_scenario([], duration_s=3.5)
    truth, det = simulator.simulate(cfg)
    assert len(truth) == 10
    assert all(fr.vehicles == () for fr in truth)
    assert all(f.polygons == () for fs in det.values() for f in fs)


def test_kinematics_at_3_3_cm_per_px():
    v = VehicleConfig("eb", entry_s=0.0, speed_mps=10.0)
    path = simulator.LanePath([[0, 800], [1600, 800]])
    a = simulator.vehicle_footprint(v, path, 2.0, 0.033)
    b = simulator.vehicle_footprint(v, path, 3.0, 0.033)
    assert b.cx - a.cx == pytest.approx(10 / 0.033)
    assert round(b.cx - a.cx) == 303
    assert a.width == pytest.approx(4.6 / 0.033) and a.height == pytest.approx(1.8 / 0.033)


def test_noise_free_cameras_report_truth_exactly():
    cfg = simulator.default_scenario(2)
    truth, det = simulator.simulate(cfg)
    for k, gt in enumerate(truth):
        for cam in range(4):
            f = det[cam][k]
            assert f.timestamp_ms == gt.timestamp_ms
            assert len(f.polygons) == len(gt.vehicles)
            for poly, v in zip(f.polygons, gt.vehicles):
                np.testing.assert_array_equal(poly, v.rect.corners())


def test_vehicles_stay_inside_grid():
    truth, _ = simulator.simulate(simulator.default_scenario(3))
    for fr in truth:
        for v in fr.vehicles:
            c = v.rect.corners()
            assert c.min() >= 0 and c.max() <= 1600


def test_seed_determinism_with_noise():
    def noisy(seed):
        cfg = simulator.default_scenario(seed, duration_s=20)
        cfg.noise = simulator.NoiseConfig(vertex_sigma_px=1.5, timestamp_sigma_ms=20, dropout=0.1)
        return simulator.simulate(cfg)[1]

    a, b, c = noisy(7), noisy(7), noisy(8)

    def flat(det):
        return [(f.camera_id, f.timestamp_ms, [p.tolist() for p in f.polygons]) for fs in det.values() for f in fs]

    assert flat(a) == flat(b)
    assert flat(a) != flat(c)


def test_noisy_frames_remain_ordered_and_jittered():
    cfg = simulator.default_scenario(5, duration_s=20)
    cfg.noise = simulator.NoiseConfig(vertex_sigma_px=1.0, timestamp_sigma_ms=30)
    truth, det = simulator.simulate(cfg)
    nominal = {fr.timestamp_ms for fr in truth}
    for fs in det.values():
        ts = [f.timestamp_ms for f in fs]
        assert ts == sorted(ts) and len(set(ts)) == len(ts)
        assert any(t not in nominal for t in ts)


def test_dropout_of_one_camera_gives_three_camera_groups():
    cfg = simulator.default_scenario(1, duration_s=15)
    cfg.noise = simulator.NoiseConfig(dropout=[0.0, 1.0, 0.0, 0.0])
    truth, det = simulator.simulate(cfg)
    assert det[1] == []
    grid, groups, buf = run_pipeline(det)
    assert len(groups) == len(truth)
    assert all(g.camera_ids == (0, 2, 3) for g in groups)


def test_config_round_trip_and_validation(tmp_path):
    cfg = simulator.default_scenario(0)
    path = tmp_path / "s.json"
    cfg.save(path)
    assert SimConfig.load(path) == cfg
    with pytest.raises(InvalidConfig):
        SimConfig(frame_interval_ms=0)
    with pytest.raises(InvalidConfig):
        SimConfig.from_dict({"seed": 1, "bogus": 2})
    with pytest.raises(InvalidConfig):
        straight_scenario([VehicleConfig("nowhere", 0.0, 10.0)])
    with pytest.raises(InvalidConfig):
        simulator.NoiseConfig(dropout=1.5)


@pytest.mark.parametrize("duration, interval, expected", [(60, 350, 172), (0, 350, 0), (1.05, 350, 3), (10, 400, 25)])
def test_frame_count_arithmetic(duration, interval, expected):
    cfg = SimConfig(duration_s=duration, frame_interval_ms=interval)
    assert len(cfg.frame_offsets_ms()) == expected
    assert abs(expected - duration * 1000 / interval) <= 1


# -- oracle ------------------------------------------------------------------------------


def _frames(rect_at, n, dt_ms=350, t0=1_000_000):
    return [GroundTruthFrame(t0 + k * dt_ms, tuple(GroundTruthVehicle(i, r) for i, r in enumerate(rect_at(k)))) for k in range(n)]


def test_oracle_stationary_vehicle():
    car = RotatedRect(800, 800, 140, 55, 20)
    mean, count = simulator.oracle_pet(_frames(lambda k: [car], 30))
    assert count.sum() == 0 and np.isnan(mean).all()


def test_oracle_two_vehicles_two_seconds_apart():
    # vehicle A leaves the conflict box after frame 3, B arrives 2.0 s later
    conflict = RotatedRect(800, 800, 40, 40, 0)
    present = {0, 1, 2, 3, 3 + 20}
    frames = _frames(lambda k: [conflict] if k in present else [], 30, dt_ms=100)
    mean, count = simulator.oracle_pet(frames)
    assert count[400, 400] == 1
    assert abs(mean[400, 400] - 2.0) <= 0.1


def test_oracle_short_gap_not_logged():
    conflict = RotatedRect(800, 800, 40, 40, 0)
    frames = _frames(lambda k: [conflict] if k in (0, 2) else [], 4, dt_ms=100)
    _, count = simulator.oracle_pet(frames)
    assert count.sum() == 0


def test_pipeline_matches_oracle_small_scenario():
    cfg = simulator.default_scenario(11, duration_s=30, n_vehicles=6)
    truth, det = simulator.simulate(cfg)
    grid, _, _ = run_pipeline(det)
    mean, count = simulator.oracle_pet(truth)
    sel = count > 0
    assert sel.sum() > 10_000
    close = np.abs(np.nan_to_num(grid.mean_pet()[sel], nan=np.inf) - mean[sel]) <= 0.35
    assert close.mean() >= 0.95
    assert (grid.update_counts()[sel] == count[sel]).mean() >= 0.95


def test_write_outputs_layout(tmp_path):
    cfg = simulator.default_scenario(0, duration_s=2)
    truth, det = simulator.simulate(cfg)
    manifest = simulator.write_outputs(tmp_path, cfg, truth, det)
    assert manifest["frames"] == 6
    files = sorted((tmp_path / "detections" / "cam0").iterdir())
    assert [p.name for p in files] == [f"{fr.timestamp_ms}.json" for fr in truth]
    back = simulator.read_ground_truth(tmp_path / "ground_truth.jsonl")
    assert [fr.timestamp_ms for fr in back] == [fr.timestamp_ms for fr in truth]
