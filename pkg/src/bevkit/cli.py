"""Command line front end: ``bevkit <command> [options]``.

Settings come from ``--config`` (YAML) and are overridden by flags. Exit codes:
0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import bev as bevmod
from .bev import BevConfig, encode_bev, render_png
from .cloud_io import (
    Calibration,
    MalformedInputError,
    ObjectClass,
    atomic_write_text,
    format_kitti_calib,
    format_label_line,
    read_kitti_bin,
    read_kitti_calib,
    read_kitti_labels,
    resolve_sensor,
    write_kitti_bin,
)
from .evaluation import CAR_05_THRESHOLDS, DEFAULT_THRESHOLDS, ScoredBox, evaluate
from .geom import Aabb2D, Box3D
from .normmap import compute_normalization_map, load_normalization_map, save_normalization_map
from .recovery import ClassPriors, Detection2D, RecoveryError, build_ground_grid, recover_box

log = logging.getLogger("bevkit")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- config


BEV_KEYS = ("cell_size", "forward_range", "lateral_range", "h_top", "fov_mode", "ground_offset")


def load_config(path) -> dict:
    if path is None:
        return {}
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise DataError(f"{path}: config must be a mapping")
    return data


def setting(args, cfg: dict, name: str, default=None):
    """Flag value if given, else config value, else default."""
    v = getattr(args, name, None)
    if v is not None:
        return v
    return cfg.get(name, default)


def bev_config(args, cfg: dict) -> BevConfig:
    values = dict(cfg.get("bev", {}) or {})
    for key in BEV_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    try:
        return BevConfig(**values)
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid BEV settings: {exc}") from exc


def class_priors(cfg: dict) -> ClassPriors:
    raw = cfg.get("priors")
    if not raw:
        return ClassPriors()
    return ClassPriors({ObjectClass(k): float(v) for k, v in raw.items()})


def _load_nmap(path, cfg: BevConfig):
    if path is None or not Path(path).exists():
        raise DataError(f"normalization map {path!r} not found; build it first with `bevkit normmap`")
    try:
        return load_normalization_map(path, cfg)
    except ValueError as exc:
        raise DataError(f"{exc}; rebuild it with `bevkit normmap`") from exc


def _map_frames(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- detections I/O


def detection_from_record(rec: dict) -> Detection2D:
    a = rec["aabb"]
    aabb = Aabb2D(float(a["cx"]), float(a["cy"]), float(a["h_bbox"]), float(a["w_bbox"]))
    bins = rec.get("yaw_bins")
    yaw = rec.get("yaw")
    return Detection2D(
        ObjectClass(rec["class"]),
        float(rec.get("score", 1.0)),
        aabb,
        yaw_bins=None if bins is None else np.asarray(bins, dtype=np.float64),
        yaw=None if yaw is None else float(yaw),
        frame_id=str(rec["frame_id"]),
    )


def detection_to_record(det: Detection2D) -> dict:
    rec = {
        "frame_id": det.frame_id,
        "class": det.cls.value,
        "score": det.score,
        "aabb": {"cx": det.aabb.cx, "cy": det.aabb.cy, "h_bbox": det.aabb.h_bbox, "w_bbox": det.aabb.w_bbox},
    }
    if det.yaw_bins is not None:
        rec["yaw_bins"] = [float(p) for p in det.yaw_bins]
    else:
        rec["yaw"] = det.yaw
    return rec


def box_to_record(box: Box3D) -> dict:
    return {"x": box.x, "y": box.y, "z": box.z, "l": box.l, "w": box.w, "h": box.h, "yaw": box.yaw}


def read_jsonl(path):
    """Yield (line number, record or None, error message)."""
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            if not isinstance(rec, dict):
                raise ValueError("record is not an object")
            yield lineno, rec, None
        except ValueError as exc:
            yield lineno, None, str(exc)


# ---------------------------------------------------------------- commands


def cmd_normmap(args, cfg) -> int:
    spec = resolve_sensor(setting(args, cfg, "sensor", "hdl64e"))
    grid = bev_config(args, cfg)
    out = Path(setting(args, cfg, "normmap") or Path(setting(args, cfg, "output_dir", ".")) / "normmap.bin")
    nmap = compute_normalization_map(spec, grid)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_normalization_map(nmap, out)
    g = nmap.grid
    print(f"normalization map {g.shape[0]}x{g.shape[1]} -> {out}")
    print(f"M_max min={int(g.min())} max={int(g.max())} mean={g.mean():.3f} hash={nmap.sensor_hash[:16]}")
    return EXIT_OK


def cmd_encode(args, cfg) -> int:
    grid = bev_config(args, cfg)
    nmap = _load_nmap(setting(args, cfg, "normmap"), grid)
    cloud_dir = Path(setting(args, cfg, "cloud_dir"))
    out_dir = Path(setting(args, cfg, "output_dir", "bev"))
    out_dir.mkdir(parents=True, exist_ok=True)
    files = sorted(cloud_dir.glob("*.bin"))

    def one(path):
        cloud = read_kitti_bin(path)
        render_png(encode_bev(cloud, grid, nmap), out_dir / f"{path.stem}.png")
        return path.stem

    done = _map_frames(one, files, args.jobs)
    print(f"encoded {len(done)} frame(s) into {out_dir}")
    return EXIT_OK


def cmd_render(args, cfg) -> int:
    grid = bev_config(args, cfg)
    nmap = _load_nmap(setting(args, cfg, "normmap"), grid)
    cloud = read_kitti_bin(args.cloud)
    if args.remove_ground is not None:
        cloud = bevmod.remove_ground(cloud, args.ground_grid, args.remove_ground)
    image = encode_bev(cloud, grid, nmap)
    if args.channels:
        image = bevmod.isolate_channels(image, [c.strip() for c in args.channels.split(",") if c.strip()])
    render_png(image, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_recover(args, cfg) -> int:
    grid = bev_config(args, cfg)
    nmap = _load_nmap(setting(args, cfg, "normmap"), grid)
    priors = class_priors(cfg)
    cloud_dir = Path(setting(args, cfg, "cloud_dir"))
    out = Path(args.out)

    frames: dict[str, list] = {}
    skipped = 0
    for lineno, rec, err in read_jsonl(args.detections):
        if rec is not None:
            try:
                det = detection_from_record(rec)
                frames.setdefault(det.frame_id, []).append((rec, det))
                continue
            except (KeyError, TypeError, ValueError) as exc:
                err = str(exc)
        log.warning("detections line %d skipped: %s", lineno, err)
        skipped += 1

    def one(item):
        frame_id, entries = item
        cloud_path = cloud_dir / f"{frame_id}.bin"
        if not cloud_path.exists():
            log.warning("frame %s: no point cloud at %s", frame_id, cloud_path)
            return [], len(entries)
        cloud = read_kitti_bin(cloud_path)
        image = encode_bev(cloud, grid, nmap)
        ground = build_ground_grid(cloud, grid)
        lines, failed = [], 0
        for rec, det in entries:
            try:
                box = recover_box(det, image, ground, priors)
            except RecoveryError as exc:
                log.warning("frame %s: detection dropped: %s", frame_id, exc)
                failed += 1
                continue
            lines.append(json.dumps({**rec, "box3d": box_to_record(box)}))
        return lines, failed

    results = _map_frames(one, sorted(frames.items()), args.jobs)
    lines = [ln for r, _ in results for ln in r]
    failed = sum(f for _, f in results)
    atomic_write_text(out, "".join(ln + "\n" for ln in lines))
    print(f"recovered {len(lines)} box(es) -> {out}; skipped lines: {skipped}; failed detections: {failed}")
    return EXIT_OK


def _read_boxes(path):
    boxes: dict[str, list] = {}
    skipped = 0
    for lineno, rec, err in read_jsonl(path):
        try:
            if rec is None:
                raise ValueError(err)
            b = rec["box3d"]
            box = Box3D(*(float(b[k]) for k in ("x", "y", "z", "l", "w", "h", "yaw")))
            boxes.setdefault(str(rec["frame_id"]), []).append(
                ScoredBox(ObjectClass(rec["class"]), float(rec.get("score", 1.0)), box, str(rec["frame_id"]))
            )
        except (KeyError, TypeError, ValueError) as exc:
            log.warning("boxes line %d skipped: %s", lineno, exc)
            skipped += 1
    return boxes, skipped


def cmd_eval(args, cfg) -> int:
    label_dir = Path(setting(args, cfg, "label_dir"))
    calib_dir = setting(args, cfg, "calib_dir")
    out_dir = Path(setting(args, cfg, "output_dir", "eval"))
    boxes, skipped = _read_boxes(args.boxes)
    eval_cfg = cfg.get("eval", {}) or {}
    car_iou = args.car_iou if args.car_iou is not None else eval_cfg.get("car_iou")
    thresholds = dict(DEFAULT_THRESHOLDS)
    if car_iou is not None:
        thresholds = dict(CAR_05_THRESHOLDS) if float(car_iou) == 0.5 else {**thresholds, ObjectClass.CAR: float(car_iou)}

    frames = {}
    for label_path in sorted(label_dir.glob("*.txt")):
        fid = label_path.stem
        calib = Calibration.default()
        if calib_dir is not None and (Path(calib_dir) / f"{fid}.txt").exists():
            calib = read_kitti_calib(Path(calib_dir) / f"{fid}.txt")
        frames[fid] = (boxes.get(fid, []), read_kitti_labels(label_path, calib))
    missing = sorted(set(boxes) - set(frames))
    report = evaluate(frames, thresholds)
    report.skipped_frames = missing
    out_dir.mkdir(parents=True, exist_ok=True)
    table = report.table()
    atomic_write_text(out_dir / "report.txt", table + "\n")
    payload = report.to_json()
    payload["skipped_lines"] = skipped
    atomic_write_text(out_dir / "report.json", json.dumps(payload, indent=1))
    print(table)
    return EXIT_OK


def cmd_simulate(args, cfg) -> int:
    from .sim import oracle_detections, random_scene, read_scene, scene_ground_truth, simulate_scan

    spec = resolve_sensor(setting(args, cfg, "sensor", "hdl64e"))
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    if args.scene:
        scene = read_scene(args.scene, spec)
    else:
        scene = random_scene(args.random, spec, seed=seed)
    out_dir = Path(setting(args, cfg, "output_dir", "sim"))
    fid = args.frame_id
    for sub in ("velodyne", "label_2", "calib"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    cloud = simulate_scan(scene, spec, dropout=args.dropout, seed=seed, frame_id=fid)
    write_kitti_bin(cloud, out_dir / "velodyne" / f"{fid}.bin")
    calib = Calibration.default()
    gts = scene_ground_truth(scene)
    atomic_write_text(out_dir / "label_2" / f"{fid}.txt", "".join(format_label_line(g, calib) + "\n" for g in gts))
    atomic_write_text(out_dir / "calib" / f"{fid}.txt", format_kitti_calib(calib))
    if args.detections:
        n_bins = int(setting(args, cfg, "n_bins", 16))
        dets = oracle_detections(gts, n_bins=n_bins, frame_id=fid)
        atomic_write_text(Path(args.detections), "".join(json.dumps(detection_to_record(d)) + "\n" for d in dets))
    print(f"simulated {len(cloud)} points, {len(gts)} object(s) -> {out_dir}")
    return EXIT_OK


def cmd_augment(args, cfg) -> int:
    grid = bev_config(args, cfg)
    nmap = _load_nmap(setting(args, cfg, "normmap"), grid)
    cloud = read_kitti_bin(args.cloud)
    calib = read_kitti_calib(args.calib) if args.calib else Calibration.default()
    objects = read_kitti_labels(args.labels, calib) if args.labels else []
    frame = bevmod.AnnotatedFrame(encode_bev(cloud, grid, nmap), objects)
    if args.flip:
        frame = bevmod.flip_horizontal(frame)
    if args.rot:
        try:
            frame = bevmod.rotate90(frame, args.rot)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
    out_dir = Path(setting(args, cfg, "output_dir", "augment"))
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.cloud).stem
    render_png(frame.bev, out_dir / f"{stem}.png")
    recs = [
        {"class": o.cls.value, "box3d": box_to_record(o.box3d) if o.box3d else None} for o in frame.objects
    ]
    atomic_write_text(out_dir / f"{stem}.json", json.dumps(recs, indent=1))
    print(f"wrote {out_dir / (stem + '.png')} with {len(recs)} object(s)")
    return EXIT_OK


def cmd_selftest(args, cfg) -> int:
    from .selftest import run_selftest

    ok = run_selftest(seed=args.seed or 0, quick=not args.full)
    return EXIT_OK if ok else EXIT_DATA


# ---------------------------------------------------------------- parser


def _add_bev_flags(p):
    g = p.add_argument_group("BEV grid")
    g.add_argument("--cell-size", dest="cell_size", type=float)
    g.add_argument("--forward-range", dest="forward_range", type=float)
    g.add_argument("--lateral-range", dest="lateral_range", type=float)
    g.add_argument("--h-top", dest="h_top", type=float)
    g.add_argument("--fov", dest="fov_mode", choices=[bevmod.FRONTAL_110, bevmod.FULL_360])
    g.add_argument("--ground-offset", dest="ground_offset", type=float)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration; flags override it")
    common.add_argument("--jobs", type=int, default=1, help="frames processed in parallel")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="bevkit", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("normmap", parents=[common], help="build and cache the normalization map")
    p.add_argument("--sensor", help="builtin name (vlp16, hdl32e, hdl64e) or YAML path")
    p.add_argument("--normmap", help="cache file to write")
    p.add_argument("--output-dir", dest="output_dir")
    _add_bev_flags(p)
    p.set_defaults(func=cmd_normmap)

    p = sub.add_parser("encode", parents=[common], help="encode every .bin in a directory to PNG")
    p.add_argument("--cloud-dir", dest="cloud_dir")
    p.add_argument("--normmap")
    p.add_argument("--output-dir", dest="output_dir")
    _add_bev_flags(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("render", parents=[common], help="encode one scan, optionally isolating channels")
    p.add_argument("cloud")
    p.add_argument("--out", required=True)
    p.add_argument("--normmap")
    p.add_argument("--channels", help="comma list of height,intensity,density to keep")
    p.add_argument("--remove-ground", type=float, metavar="THRESHOLD", help="drop flat cells first")
    p.add_argument("--ground-grid", type=float, default=0.5, help="cell size for ground removal (m)")
    _add_bev_flags(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("recover", parents=[common], help="turn 2D detections into 3D boxes")
    p.add_argument("detections")
    p.add_argument("--out", required=True)
    p.add_argument("--cloud-dir", dest="cloud_dir")
    p.add_argument("--normmap")
    _add_bev_flags(p)
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("eval", parents=[common], help="KITTI-style AP/AOS on BEV and 3D overlap")
    p.add_argument("boxes")
    p.add_argument("--label-dir", dest="label_dir")
    p.add_argument("--calib-dir", dest="calib_dir")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--car-iou", dest="car_iou", type=float, help="Car IoU threshold (0.5 for the relaxed table)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("simulate", parents=[common], help="ray-cast a scene to a KITTI .bin and labels")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--scene")
    src.add_argument("--random", type=int, metavar="N", help="random visible scene with N objects")
    p.add_argument("--sensor")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--frame-id", default="000000")
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--detections", help="also write oracle detections (JSON lines) here")
    p.add_argument("--n-bins", dest="n_bins", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("augment", parents=[common], help="flip / rotate an encoded frame and its labels")
    p.add_argument("cloud")
    p.add_argument("--labels")
    p.add_argument("--calib")
    p.add_argument("--normmap")
    p.add_argument("--flip", action="store_true")
    p.add_argument("--rot", type=int, default=0, help="counter-clockwise quarter turns")
    p.add_argument("--output-dir", dest="output_dir")
    _add_bev_flags(p)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("selftest", parents=[common], help="oracle agreement and round-trip checks")
    p.add_argument("--full", action="store_true", help="acceptance-sized sample counts")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.jobs < 1:
            parser.error("--jobs must be >= 1")
        for key in ("cloud_dir", "label_dir"):
            if hasattr(args, key) and args.func in (cmd_encode, cmd_recover, cmd_eval) and setting(args, cfg, key) is None:
                if (key == "cloud_dir") != (args.func is cmd_eval):
                    parser.error(f"--{key.replace('_', '-')} is required")
        return args.func(args, cfg)
    except DataError as exc:
        print(f"bevkit: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (MalformedInputError, ValueError, FileNotFoundError, yaml.YAMLError) as exc:
        print(f"bevkit: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
