"""Command-line pipeline: calibrate, simulate, fuse, pet, heatmap, query.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from petmap import fusion, geometry, pet, render, simulator, sync
from petmap.errors import InvalidConfig, PetmapError
from petmap.store import DetectionRecord, GroupRecord, RecordStore, RectangleRecord, read_detection_file

logger = logging.getLogger("petmap")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
TIME_MAX_MS = 2**62


class UsageError(Exception):
    pass


@dataclass
class PipelineConfig:
    calibration: str | None = None
    grid: list = field(default_factory=lambda: [fusion.GRID_SIZE, fusion.GRID_SIZE])
    roi: list = field(default_factory=lambda: [*pet.ROI_ORIGIN, pet.ROI_SIZE, pet.ROI_SIZE])
    fusion: fusion.FusionConfig = field(default_factory=fusion.FusionConfig)
    window_ms: int = sync.DEFAULT_WINDOW_MS
    store: str = "petmap-store"
    meters_per_px: float = pet.METERS_PER_PX
    min_interval_s: float = pet.MIN_INTERVAL_S
    log_colormap: bool = True
    colormap_percentile: float = 99.0
    overlay_alpha: float = 0.6

    def __post_init__(self):
        if not isinstance(self.fusion, fusion.FusionConfig):
            self.fusion = fusion.FusionConfig.from_dict(self.fusion)
        self.grid = [int(v) for v in self.grid]
        self.roi = [int(v) for v in self.roi]
        if len(self.grid) != 2 or min(self.grid) <= 0:
            raise InvalidConfig("grid must be two positive integers")
        if len(self.roi) != 4 or min(self.roi[2:]) <= 0 or min(self.roi[:2]) < 0:
            raise InvalidConfig("roi must be x, y, width, height")
        for name in ("window_ms", "meters_per_px", "min_interval_s", "colormap_percentile"):
            if not getattr(self, name) > 0:
                raise InvalidConfig(f"{name} must be positive")
        if not 0 <= self.overlay_alpha <= 1:
            raise InvalidConfig("overlay_alpha must lie in [0, 1]")
        if self.calibration is not None and not Path(self.calibration).exists():
            raise InvalidConfig(f"calibration file not found: {self.calibration}")

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fusion"] = self.fusion.to_dict()
        return d

    def new_pet_grid(self) -> pet.PetGrid:
        x, y, w, h = self.roi
        return pet.PetGrid((x, y), w, h, self.grid[0], self.grid[1], self.min_interval_s)


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dims(text: str) -> list[int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WIDTHxHEIGHT, got {text!r}") from None
    return [w, h]


def _roi(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",")]
    except ValueError:
        vals = []
    if len(vals) != 4:
        raise argparse.ArgumentTypeError(f"expected X,Y,WIDTH,HEIGHT, got {text!r}")
    return vals


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config (JSON)")
    common.add_argument("--grid", type=_dims, help="global grid, e.g. 1600x1600")
    common.add_argument("--roi", type=_roi, help="PET region as X,Y,WIDTH,HEIGHT")
    common.add_argument("--window-ms", type=int, help="sync disparity window")
    common.add_argument("--store", help="record store directory")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--from-ms", type=int, help="range start (inclusive, unix ms)")
    common.add_argument("--to-ms", type=int, help="range end (exclusive, unix ms)")
    common.add_argument("--log-colormap", action=argparse.BooleanOptionalAction, default=None)
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = _Parser(prog="petmap", description="Bird's-eye PET heatmaps from multi-camera detections.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("calibrate", parents=[common], help="estimate camera->grid homographies")
    c.add_argument("correspondences", help="JSON or CSV point correspondences")

    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic scene")
    s.add_argument("scenario", nargs="?", help="scenario JSON (default: built-in scenario)")

    f = sub.add_parser("fuse", parents=[common], help="sync and fuse detection files into the store")
    f.add_argument("detections", help="directory of detection files")
    f.add_argument("--workers", type=int, default=1, help="fusion worker threads")
    f.add_argument("--watch", action="store_true", help="keep polling for new files")
    f.add_argument("--poll-s", type=float, default=1.0)
    f.add_argument("--idle-exit-s", type=float, default=None, help="stop watching after this idle time")

    t = sub.add_parser("pet", parents=[common], help="replay stored rectangles into PET matrices")
    t.add_argument("--heatmap", action="store_true", help="also render PNG heatmaps")
    t.add_argument("--background", help="PNG backdrop for the heatmap overlay")

    h = sub.add_parser("heatmap", parents=[common], help="render exported matrices as PNG")
    h.add_argument("export", help="directory holding pet_mean.txt and pet_count.txt")
    h.add_argument("--background", help="PNG backdrop for the overlay")

    q = sub.add_parser("query", parents=[common], help="print stored records as JSON lines")
    q.add_argument("--kind", choices=("rectangles", "detections", "groups"), default="rectangles")
    return p


def load_config(args) -> PipelineConfig:
    d = {}
    if args.config:
        try:
            d = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise InvalidConfig(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(d, dict):
            raise InvalidConfig("config must be a JSON object")
    overrides = {
        "grid": args.grid,
        "roi": args.roi,
        "window_ms": args.window_ms,
        "store": args.store,
        "log_colormap": args.log_colormap,
    }
    d.update({k: v for k, v in overrides.items() if v is not None})
    return PipelineConfig.from_dict(d)


# ---------------------------------------------------------------------------
# calibrate
# ---------------------------------------------------------------------------


def read_correspondences(path) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """``{camera_id: (camera_pts, global_pts)}`` from JSON or CSV."""
    path = Path(path)
    rows = []
    if path.suffix.lower() == ".csv":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    else:
        doc = json.loads(path.read_text(encoding="utf-8"))
        for cam in doc["cameras"]:
            for pt in cam["points"]:
                rows.append({"camera_id": cam["camera_id"], **pt})
    out: dict[int, list] = {}
    for r in rows:
        cam = int(r["camera_id"])
        out.setdefault(cam, []).append(
            [float(r["camera_x"]), float(r["camera_y"]), float(r["global_x"]), float(r["global_y"])]
        )
    return {k: (np.array(v)[:, :2], np.array(v)[:, 2:]) for k, v in sorted(out.items())}


def cmd_calibrate(args, cfg: PipelineConfig) -> int:
    try:
        pairs = read_correspondences(args.correspondences)
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidConfig(f"malformed correspondence file: {exc}") from exc
    if not pairs:
        raise InvalidConfig("no correspondences found")
    cameras = []
    for cam, (src, dst) in pairs.items():
        h = geometry.estimate_homography(src, dst)
        err = float(geometry.reprojection_errors(h, src, dst).max())
        cameras.append({"camera_id": cam, "homography": h.tolist(), "max_reprojection_error_px": err})
        print(f"camera {cam}: {len(src)} points, max reprojection error {err:.6g} px")
    out = Path(args.out or "calibration.json")
    out.write_text(json.dumps({"cameras": cameras}, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {out}")
    return EXIT_OK


def load_calibration(path) -> dict[int, np.ndarray]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return {int(c["camera_id"]): geometry.normalize_homography(c["homography"]) for c in doc["cameras"]}


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(args, cfg: PipelineConfig) -> int:
    if args.scenario:
        scen = simulator.SimConfig.load(args.scenario)
        if args.seed is not None:
            scen.seed = args.seed
    else:
        scen = simulator.default_scenario(args.seed or 0)
    truth, detections = simulator.simulate(scen)
    out = Path(args.out or "sim-out")
    manifest = simulator.write_outputs(out, scen, truth, detections)
    scen.save(out / "scenario.json")
    print(f"{manifest['frames']} frames, detections per camera {manifest['detections_per_camera']}")
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# fuse
# ---------------------------------------------------------------------------


def _detection_files(root: Path) -> list[Path]:
    return sorted(p for p in root.rglob("*") if p.suffix in (".json", ".jsonl") and p.is_file())


def _load_records(paths, calibration) -> list[DetectionRecord]:
    out = []
    for p in paths:
        try:
            recs = read_detection_file(p)
            if calibration is not None:
                recs = [_to_global(r, calibration) for r in recs]
        except (OSError, ValueError, KeyError, TypeError, PetmapError) as exc:
            logger.warning("skipping %s: %s", p, exc)
            continue
        out.extend(recs)
    out.sort(key=lambda r: (r.timestamp_ms, r.camera_id))
    return out


def _to_global(rec: DetectionRecord, calibration) -> DetectionRecord:
    h = calibration[rec.camera_id]
    polys = [geometry.project_polygon(h, p).tolist() for p in rec.polygons]
    return DetectionRecord(rec.camera_id, rec.timestamp_ms, polys)


class FusePipeline:
    """Sync buffer -> fusion -> store, shared by batch and watch modes."""

    def __init__(self, cfg: PipelineConfig, store: RecordStore, workers: int = 1):
        self.cfg = cfg
        self.store = store
        self.buffer = sync.SyncBuffer(window_ms=cfg.window_ms)
        self.workers = max(1, int(workers))
        self.rectangles_written = 0
        self.latencies_ms: list[float] = []

    def ingest(self, records) -> None:
        fresh = []
        for r in records:
            try:
                self.buffer.ingest(r.to_frame())
            except (PetmapError, ValueError) as exc:
                logger.warning("dropping frame cam %d @ %d: %s", r.camera_id, r.timestamp_ms, exc)
                continue
            fresh.append(r)
        self.store.append_detections(fresh)

    def _fuse(self, group):
        t0 = time.perf_counter()
        rects = fusion.fuse_group(group, self.cfg.fusion, *self.cfg.grid)
        return rects, (time.perf_counter() - t0) * 1000.0

    def flush(self, horizon_ms=None) -> int:
        groups = list(self.buffer.drain(horizon_ms))
        if self.workers > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                results = list(pool.map(self._fuse, groups))
        else:
            results = [self._fuse(g) for g in groups]
        records, ticks = [], []
        for g, (rects, ms) in zip(groups, results):
            self.latencies_ms.append(ms)
            records.extend(RectangleRecord.from_fitted(r) for r in rects)
            ticks.append(GroupRecord.from_group(g, len(rects)))
        self.store.append_rectangles(records)
        self.store.append_groups(ticks)
        self.rectangles_written += len(records)
        return len(groups)

    def report(self) -> str:
        st = self.buffer.stats
        mean = float(np.mean(self.latencies_ms)) if self.latencies_ms else 0.0
        return (
            f"groups: 4-camera={st['groups_4']} 3-camera={st['groups_3']} "
            f"skipped={st['skipped'] + st['reordered']}\n"
            f"rectangles written: {self.rectangles_written}\n"
            f"mean fusion latency: {mean:.1f} ms/group"
        )


def cmd_fuse(args, cfg: PipelineConfig) -> int:
    root = Path(args.detections)
    if not root.is_dir():
        raise FileNotFoundError(f"detection directory not found: {root}")
    calibration = load_calibration(cfg.calibration) if cfg.calibration else None
    pipe = FusePipeline(cfg, RecordStore(cfg.store), args.workers)

    seen: set[Path] = set()
    newest = None
    idle_since = time.monotonic()
    while True:
        paths = [p for p in _detection_files(root) if p not in seen]
        seen.update(paths)
        records = _load_records(paths, calibration)
        if records:
            newest = max(newest or 0, records[-1].timestamp_ms)
            idle_since = time.monotonic()
        pipe.ingest(records)
        if not args.watch:
            pipe.flush()
            break
        # frames still in flight can only belong to windows ending after `newest`
        pipe.flush(horizon_ms=newest)
        if args.idle_exit_s is not None and time.monotonic() - idle_since >= args.idle_exit_s:
            pipe.flush()
            break
        time.sleep(args.poll_s)
    print(pipe.report())
    return EXIT_OK


# ---------------------------------------------------------------------------
# pet / heatmap / query
# ---------------------------------------------------------------------------


def _range(args) -> tuple[int, int]:
    t0 = 0 if args.from_ms is None else args.from_ms
    t1 = TIME_MAX_MS if args.to_ms is None else args.to_ms
    return t0, t1


def replay(records, grid: pet.PetGrid, ticks=()) -> int:
    """Feed stored rectangles into ``grid`` one update per timestamp; returns updates.

    ``ticks`` adds update times with no rectangle (empty fused groups), which
    the stopwatch needs to see as vacant frames.
    """
    by_ts: dict[int, list] = {int(t): [] for t in ticks}
    for r in records:
        by_ts.setdefault(r.timestamp_ms, []).append(r.corners)
    for ts in sorted(by_ts):
        grid.update(by_ts[ts], ts, collect_events=False)
    return len(by_ts)


def render_exports(mean, count, out: Path, cfg: PipelineConfig, background=None) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    spec = render.pet_colormap(mean, cfg.min_interval_s, cfg.colormap_percentile, cfg.log_colormap)
    counts = np.where(count > 0, count, np.nan)
    images = {
        "pet_mean.png": render.render_heatmap(mean, spec),
        "pet_count.png": render.render_heatmap(counts, render.count_colormap(count)),
    }
    if background is not None:
        bg = render.read_png(background)
        x, y, w, h = cfg.roi
        if bg.pixels.shape[:2] == (cfg.grid[1], cfg.grid[0]):
            bg = render.RasterImage(bg.pixels[y : y + h, x : x + w])
        images = {k: render.composite_over_background(v, bg, cfg.overlay_alpha) for k, v in images.items()}
    paths = []
    for name, img in images.items():
        render.write_png(out / name, img)
        paths.append(out / name)
    return paths


def cmd_pet(args, cfg: PipelineConfig) -> int:
    t0, t1 = _range(args)
    store = RecordStore(cfg.store)
    records = store.query_rectangles(t0, t1)
    ticks = [g.timestamp_ms for g in store.query_groups(t0, t1)]
    grid = cfg.new_pet_grid()
    n = replay(records, grid, ticks)
    out = Path(args.out or "pet-out")
    mean_path, count_path = pet.export_snapshot(grid, out)
    print(f"{len(records)} rectangles over {n} updates")
    print(pet.describe_scale(cfg.roi[2], cfg.meters_per_px))
    print(f"wrote {mean_path} and {count_path}")
    if args.heatmap:
        for p in render_exports(grid.mean_pet(), grid.update_counts(), out, cfg, args.background):
            print(f"wrote {p}")
    return EXIT_OK


def cmd_heatmap(args, cfg: PipelineConfig) -> int:
    src = Path(args.export)
    mean, meta = pet.read_matrix(src / "pet_mean.txt")
    count, _ = pet.read_matrix(src / "pet_count.txt")
    if mean.shape != count.shape:
        raise ValueError("mean and count exports differ in shape")
    x, y = meta["origin"]
    cfg.roi = [x, y, mean.shape[1], mean.shape[0]]
    print(pet.describe_scale(cfg.roi[2], cfg.meters_per_px))
    for p in render_exports(mean, count, Path(args.out or src), cfg, args.background):
        print(f"wrote {p}")
    return EXIT_OK


def cmd_query(args, cfg: PipelineConfig) -> int:
    t0, t1 = _range(args)
    store = RecordStore(cfg.store)
    query = {"rectangles": store.query_rectangles, "detections": store.query_detections, "groups": store.query_groups}
    records = query[args.kind](t0, t1)
    sink = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for r in records:
            sink.write(json.dumps(r.to_dict(), separators=(",", ":")) + "\n")
    finally:
        if sink is not sys.stdout:
            sink.close()
    return EXIT_OK


COMMANDS = {
    "calibrate": cmd_calibrate,
    "simulate": cmd_simulate,
    "fuse": cmd_fuse,
    "pet": cmd_pet,
    "heatmap": cmd_heatmap,
    "query": cmd_query,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](args, cfg)
    except KeyboardInterrupt:
        return EXIT_DATA
    except (PetmapError, OSError, ValueError, KeyError) as exc:
        print(f"petmap {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
