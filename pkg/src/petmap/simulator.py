"""Synthetic intersection scenes with known ground truth.

Vehicles drive at constant speed along lane polylines on the global grid.
Each synthetic camera is given by its global->camera homography plus a
view polygon on the grid; it reports the footprints of the vehicles it
sees, perturbed in its own image plane and mapped back to the grid, at
jittered timestamps.  ``oracle_pet`` computes PET straight from the
ground-truth timelines, bypassing sync and fusion.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from petmap import geometry
from petmap.errors import InvalidConfig
from petmap.geometry import RotatedRect
from petmap.pet import METERS_PER_PX, MIN_INTERVAL_S, ROI_ORIGIN, ROI_SIZE
from petmap.sync import NUM_CAMERAS, DetectionFrame

DEFAULT_FRAME_INTERVAL_MS = 350
DEFAULT_START_MS = 1_700_000_000_000
CAR_LENGTH_M = 4.6
CAR_WIDTH_M = 1.8


@dataclass
class CameraConfig:
    camera_id: int
    homography: list  # global grid -> camera image
    view: list  # polygon on the global grid

    def __post_init__(self):
        h = np.asarray(self.homography, dtype=float)
        if h.shape != (3, 3) or not np.all(np.isfinite(h)):
            raise InvalidConfig(f"camera {self.camera_id}: homography must be a finite 3x3 matrix")
        if abs(np.linalg.det(h)) <= geometry.EPS:
            raise InvalidConfig(f"camera {self.camera_id}: singular homography")
        if not 0 <= int(self.camera_id) < NUM_CAMERAS:
            raise InvalidConfig(f"camera_id out of range: {self.camera_id}")
        view = np.asarray(self.view, dtype=float)
        if view.ndim != 2 or view.shape[1] != 2 or len(view) < 3:
            raise InvalidConfig(f"camera {self.camera_id}: view polygon needs >= 3 vertices")
        self.camera_id = int(self.camera_id)
        self.homography = h.tolist()
        self.view = view.tolist()


@dataclass
class LaneConfig:
    name: str
    points: list  # polyline on the global grid, in driving order

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float)
        if p.ndim != 2 or p.shape[1] != 2 or len(p) < 2:
            raise InvalidConfig(f"lane {self.name!r}: needs >= 2 points")
        seg = np.hypot(*np.diff(p, axis=0).T)
        if np.any(seg <= 0):
            raise InvalidConfig(f"lane {self.name!r}: repeated points")
        self.points = p.tolist()


@dataclass
class VehicleConfig:
    lane: str
    entry_s: float
    speed_mps: float
    length_m: float = CAR_LENGTH_M
    width_m: float = CAR_WIDTH_M

    def __post_init__(self):
        if not (self.speed_mps > 0 and self.length_m > 0 and self.width_m > 0):
            raise InvalidConfig("vehicle speed and dimensions must be positive")
        if self.entry_s < 0:
            raise InvalidConfig("entry_s must be non-negative")


@dataclass
class NoiseConfig:
    vertex_sigma_px: float = 0.0
    timestamp_sigma_ms: float = 0.0
    dropout: list = field(default_factory=lambda: [0.0] * NUM_CAMERAS)

    def __post_init__(self):
        if isinstance(self.dropout, (int, float)):
            self.dropout = [float(self.dropout)] * NUM_CAMERAS
        self.dropout = [float(p) for p in self.dropout]
        if len(self.dropout) != NUM_CAMERAS or any(not 0 <= p <= 1 for p in self.dropout):
            raise InvalidConfig("dropout must be 4 probabilities in [0, 1]")
        if self.vertex_sigma_px < 0 or self.timestamp_sigma_ms < 0:
            raise InvalidConfig("noise sigmas must be non-negative")


@dataclass
class SimConfig:
    seed: int = 0
    duration_s: float = 60.0
    frame_interval_ms: int = DEFAULT_FRAME_INTERVAL_MS
    meters_per_px: float = METERS_PER_PX
    grid: list = field(default_factory=lambda: [1600, 1600])
    start_ms: int = DEFAULT_START_MS
    cameras: list = field(default_factory=list)
    lanes: list = field(default_factory=list)
    vehicles: list = field(default_factory=list)
    noise: NoiseConfig = field(default_factory=NoiseConfig)

    def __post_init__(self):
        if int(self.frame_interval_ms) <= 0:
            raise InvalidConfig("frame_interval_ms must be positive")
        if self.duration_s < 0 or not self.meters_per_px > 0 or self.start_ms <= 0:
            raise InvalidConfig("duration_s >= 0, meters_per_px > 0 and start_ms > 0 required")
        self.frame_interval_ms = int(self.frame_interval_ms)
        self.grid = [int(v) for v in self.grid]
        if len(self.grid) != 2 or min(self.grid) <= 0:
            raise InvalidConfig("grid must be [width, height] with positive entries")
        self.cameras = [c if isinstance(c, CameraConfig) else CameraConfig(**c) for c in self.cameras]
        self.lanes = [ln if isinstance(ln, LaneConfig) else LaneConfig(**ln) for ln in self.lanes]
        self.vehicles = [v if isinstance(v, VehicleConfig) else VehicleConfig(**v) for v in self.vehicles]
        if not isinstance(self.noise, NoiseConfig):
            self.noise = NoiseConfig(**self.noise)
        ids = [c.camera_id for c in self.cameras]
        if len(set(ids)) != len(ids):
            raise InvalidConfig("duplicate camera_id")
        names = {ln.name for ln in self.lanes}
        missing = {v.lane for v in self.vehicles} - names
        if missing:
            raise InvalidConfig(f"vehicles reference unknown lanes: {sorted(missing)}")

    @classmethod
    def from_dict(cls, d: dict) -> SimConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown scenario keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def load(cls, path) -> SimConfig:
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise InvalidConfig(f"cannot read scenario {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise InvalidConfig("scenario must be a JSON object")
        return cls.from_dict(d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    def frame_offsets_ms(self) -> np.ndarray:
        """Nominal frame times relative to ``start_ms``: k * interval < duration."""
        n = math.ceil(round(self.duration_s * 1000.0, 6) / self.frame_interval_ms)
        return np.arange(max(n, 0), dtype=np.int64) * self.frame_interval_ms


@dataclass(frozen=True)
class GroundTruthVehicle:
    vehicle_id: int
    rect: RotatedRect


@dataclass(frozen=True)
class GroundTruthFrame:
    timestamp_ms: int
    vehicles: tuple = ()

    @property
    def rects(self) -> list[RotatedRect]:
        return [v.rect for v in self.vehicles]


class LanePath:
    """Arc-length parametrization of a lane polyline."""

    def __init__(self, points):
        self.points = np.asarray(points, dtype=float)
        seg = np.diff(self.points, axis=0)
        self.seg_len = np.hypot(seg[:, 0], seg[:, 1])
        self.seg_dir = seg / self.seg_len[:, None]
        self.cum = np.concatenate([[0.0], np.cumsum(self.seg_len)])

    @property
    def length(self) -> float:
        return float(self.cum[-1])

    def pose(self, s: float):
        """Position and heading (degrees) at arc length ``s``."""
        k = int(np.clip(np.searchsorted(self.cum, s, side="right") - 1, 0, len(self.seg_len) - 1))
        p = self.points[k] + (s - self.cum[k]) * self.seg_dir[k]
        d = self.seg_dir[k]
        return p, math.degrees(math.atan2(d[1], d[0]))


def vehicle_footprint(vehicle: VehicleConfig, path: LanePath, t_s: float, meters_per_px: float):
    """Footprint at time ``t_s``, or None when the vehicle is not on its lane.

    The lane point is the vehicle's center; ``s`` runs from 0 at the lane start.
    """
    s = (t_s - vehicle.entry_s) * vehicle.speed_mps / meters_per_px
    if s < 0 or s > path.length:
        return None
    p, heading = path.pose(s)
    return RotatedRect.normalized(
        p[0], p[1], vehicle.length_m / meters_per_px, vehicle.width_m / meters_per_px, heading
    )


def arc_points(center, radius, start_deg, end_deg, step_deg=3.0):
    """Points on a circular arc (angles in the y-down grid frame)."""
    n = max(2, int(math.ceil(abs(end_deg - start_deg) / step_deg)) + 1)
    a = np.radians(np.linspace(start_deg, end_deg, n))
    return np.column_stack([center[0] + radius * np.cos(a), center[1] + radius * np.sin(a)])


def _inside_grid(rect: RotatedRect, width: int, height: int) -> bool:
    c = rect.corners()
    return bool(np.all(c >= 0) and np.all(c[:, 0] <= width) and np.all(c[:, 1] <= height))


def ground_truth(cfg: SimConfig) -> list[GroundTruthFrame]:
    paths = {ln.name: LanePath(ln.points) for ln in cfg.lanes}
    width, height = cfg.grid
    frames = []
    for off in cfg.frame_offsets_ms():
        t = off / 1000.0
        vehicles = []
        for vid, v in enumerate(cfg.vehicles):
            rect = vehicle_footprint(v, paths[v.lane], t, cfg.meters_per_px)
            if rect is not None and _inside_grid(rect, width, height):
                vehicles.append(GroundTruthVehicle(vid, rect))
        frames.append(GroundTruthFrame(int(cfg.start_ms + off), tuple(vehicles)))
    return frames


def _observe(corners: np.ndarray, h: np.ndarray, h_inv: np.ndarray, sigma: float, rng):
    if sigma <= 0:
        return corners.copy()
    img = geometry.project_points(h, corners)
    img = img + rng.normal(0.0, sigma, img.shape)
    return geometry.project_points(h_inv, img)


def simulate(cfg: SimConfig):
    """Ground-truth frames plus, per camera id, that camera's detection frames."""
    rng = np.random.default_rng(cfg.seed)
    truth = ground_truth(cfg)
    detections = {c.camera_id: [] for c in cfg.cameras}
    cams = [
        (c, np.asarray(c.homography), geometry.invert_homography(c.homography), np.asarray(c.view))
        for c in cfg.cameras
    ]
    noise = cfg.noise
    for gt in truth:
        for cam, h, h_inv, view in cams:
            # draw every variate even for dropped frames so one camera's
            # dropout setting does not reshuffle the others' noise
            drop = rng.random() < noise.dropout[cam.camera_id]
            jitter = rng.normal(0.0, noise.timestamp_sigma_ms) if noise.timestamp_sigma_ms > 0 else 0.0
            polys = []
            for v in gt.vehicles:
                corners = v.rect.corners()
                if geometry.polygons_intersect(corners, view):
                    polys.append(_observe(corners, h, h_inv, noise.vertex_sigma_px, rng))
            if drop:
                continue
            ts = gt.timestamp_ms + int(round(jitter))
            prev = detections[cam.camera_id]
            if prev:
                ts = max(ts, prev[-1].timestamp_ms + 1)
            detections[cam.camera_id].append(DetectionFrame(cam.camera_id, max(ts, 1), tuple(polys)))
    return truth, detections


# ---------------------------------------------------------------------------
# Oracle PET
# ---------------------------------------------------------------------------


def _rect_cover(rect: RotatedRect, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Pixel centers inside ``rect`` via its own axes (no polygon fill)."""
    u, v = rect.axes()
    dx, dy = xs - rect.cx, ys - rect.cy
    a = dx * u[0] + dy * u[1]
    b = dx * v[0] + dy * v[1]
    return (np.abs(a) < rect.width / 2) & (np.abs(b) < rect.height / 2)


def oracle_pet(frames, roi=(ROI_ORIGIN, ROI_SIZE, ROI_SIZE), min_interval_s: float = MIN_INTERVAL_S):
    """Mean PET and interval count per ROI pixel from ground-truth timelines.

    For every pixel, each maximal vacancy between two occupied frames a < b
    (with frames a+1 .. b-1 vacant) lasts t[b-1] - t[a]; vacancies of at
    least ``min_interval_s`` are averaged.
    """
    (ox, oy), rw, rh = roi
    ys, xs = np.mgrid[0:rh, 0:rw].astype(float)
    xs += ox + 0.5
    ys += oy + 0.5
    last_occ_t = np.full((rh, rw), np.nan)
    prev_t = None
    prev_occ = np.zeros((rh, rw), dtype=bool)
    total = np.zeros((rh, rw))
    count = np.zeros((rh, rw), dtype=np.int64)
    for fr in frames:
        t = fr.timestamp_ms / 1000.0
        occ = np.zeros((rh, rw), dtype=bool)
        for rect in fr.rects:
            occ |= _rect_cover(rect, xs, ys)
        if prev_t is not None:
            arriving = occ & ~prev_occ & ~np.isnan(last_occ_t)
            gap = prev_t - last_occ_t
            logged = arriving & (gap >= min_interval_s - 1e-9)
            total[logged] += gap[logged]
            count[logged] += 1
        last_occ_t[occ] = t
        prev_occ = occ
        prev_t = t
    mean = np.full((rh, rw), np.nan)
    has = count > 0
    mean[has] = total[has] / count[has]
    return mean, count


# ---------------------------------------------------------------------------
# Default scenario and file output
# ---------------------------------------------------------------------------


def _camera_homography(side: int, width: int, height: int) -> np.ndarray:
    """Oblique view from one side of the grid onto a 1920x1080 image."""
    grid = np.array([[0, 0], [width, 0], [width, height], [0, height]], dtype=float)
    # the far edge shrinks toward the horizon; rotate which grid side is near
    img = np.array([[660, 180], [1260, 180], [1900, 1060], [20, 1060]], dtype=float)
    return geometry.estimate_homography(np.roll(grid, side, axis=0), img)


def default_scenario(seed: int = 0, duration_s: float = 60.0, n_vehicles: int = 10) -> SimConfig:
    w = h = 1600
    lanes = [
        LaneConfig("eb", [[0, 850], [w, 850]]),
        LaneConfig("wb", [[w, 750], [0, 750]]),
        LaneConfig("nb", [[850, h], [850, 0]]),
        LaneConfig("sb", [[750, 0], [750, h]]),
        LaneConfig(
            "nb_left",
            [[850, h]] + arc_points((700, 900), 150, 0, -90).tolist() + [[0, 750]],
        ),
    ]
    rng = np.random.default_rng(seed)
    order = ["eb", "nb", "wb", "sb", "nb_left"]
    vehicles = []
    for k in range(n_vehicles):
        vehicles.append(
            VehicleConfig(
                lane=order[k % len(order)],
                entry_s=round(3.0 * k + float(rng.uniform(0.0, 0.5)), 3),
                speed_mps=round(float(rng.uniform(8.0, 12.0)), 3),
            )
        )
    view = [[-1, -1], [w + 1, -1], [w + 1, h + 1], [-1, h + 1]]
    cameras = [CameraConfig(k, _camera_homography(k, w, h).tolist(), view) for k in range(NUM_CAMERAS)]
    return SimConfig(
        seed=seed, duration_s=duration_s, grid=[w, h], cameras=cameras, lanes=lanes, vehicles=vehicles
    )


def correspondences(cfg: SimConfig, n_points: int = 8) -> dict:
    """Calibration point pairs for every camera, sampled from the grid."""
    rng = np.random.default_rng(cfg.seed)
    w, h = cfg.grid
    out = []
    for cam in cfg.cameras:
        pts = rng.uniform([0.05 * w, 0.05 * h], [0.95 * w, 0.95 * h], size=(n_points, 2))
        img = geometry.project_points(cam.homography, pts)
        out.append(
            {
                "camera_id": cam.camera_id,
                "points": [
                    {
                        "label": f"p{i}",
                        "camera_x": float(ix),
                        "camera_y": float(iy),
                        "global_x": float(gx),
                        "global_y": float(gy),
                    }
                    for i, ((gx, gy), (ix, iy)) in enumerate(zip(pts, img))
                ],
            }
        )
    return {"cameras": out}


def write_outputs(out_dir, cfg: SimConfig, truth, detections) -> dict:
    """Write ``detections/cam<k>/<unix_ms>.json``, ground truth and a manifest."""
    from petmap.store import DetectionRecord, write_detection_file

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_det = {}
    for cam_id, frames in sorted(detections.items()):
        cam_dir = out / "detections" / f"cam{cam_id}"
        cam_dir.mkdir(parents=True, exist_ok=True)
        for f in frames:
            write_detection_file(cam_dir, DetectionRecord.from_frame(f))
        n_det[str(cam_id)] = len(frames)
    with open(out / "ground_truth.jsonl", "w", encoding="utf-8") as fh:
        for gt in truth:
            row = {
                "timestamp_ms": gt.timestamp_ms,
                "vehicles": [
                    {"id": v.vehicle_id, "corners": v.rect.corners().tolist()} for v in gt.vehicles
                ],
            }
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")
    (out / "correspondences.json").write_text(
        json.dumps(correspondences(cfg), indent=2) + "\n", encoding="utf-8"
    )
    manifest = {
        "seed": cfg.seed,
        "frames": len(truth),
        "frame_interval_ms": cfg.frame_interval_ms,
        "detections_per_camera": n_det,
        "meters_per_px": cfg.meters_per_px,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest


def read_ground_truth(path) -> list[GroundTruthFrame]:
    frames = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            vehicles = tuple(
                GroundTruthVehicle(v["id"], RotatedRect.from_corners(v["corners"])) for v in d["vehicles"]
            )
            frames.append(GroundTruthFrame(d["timestamp_ms"], vehicles))
    return frames
