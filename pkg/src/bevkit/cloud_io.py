"""Readers and writers for KITTI velodyne scans, labels, calibration and sensor specs."""

from __future__ import annotations

import enum
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .geom import Box3D, wrap_angle


class MalformedInputError(ValueError):
    """File contents do not follow the expected format."""


class ObjectClass(str, enum.Enum):
    CAR = "Car"
    PEDESTRIAN = "Pedestrian"
    CYCLIST = "Cyclist"
    DONTCARE = "DontCare"


# Non-target KITTI types are kept as DontCare regions so detections on them are not penalized.
_KITTI_TYPE_MAP = {
    "Car": ObjectClass.CAR,
    "Pedestrian": ObjectClass.PEDESTRIAN,
    "Cyclist": ObjectClass.CYCLIST,
    "DontCare": ObjectClass.DONTCARE,
    "Van": ObjectClass.DONTCARE,
    "Truck": ObjectClass.DONTCARE,
    "Person_sitting": ObjectClass.DONTCARE,
    "Tram": ObjectClass.DONTCARE,
    "Misc": ObjectClass.DONTCARE,
}

EVAL_CLASSES = (ObjectClass.CAR, ObjectClass.PEDESTRIAN, ObjectClass.CYCLIST)


class Difficulty(enum.IntEnum):
    EASY = 0
    MODERATE = 1
    HARD = 2


# KITTI public thresholds: min 2D box height (px), max occlusion level, max truncation.
DIFFICULTY_THRESHOLDS = {
    Difficulty.EASY: (40.0, 0, 0.15),
    Difficulty.MODERATE: (25.0, 1, 0.30),
    Difficulty.HARD: (25.0, 2, 0.50),
}


def difficulty_of(image_bbox_height: float, occlusion: int, truncation: float) -> Difficulty | None:
    """Easiest KITTI difficulty the object qualifies for, or None if it fits none."""
    for level in Difficulty:
        min_h, max_occ, max_trunc = DIFFICULTY_THRESHOLDS[level]
        if image_bbox_height >= min_h and occlusion <= max_occ and truncation <= max_trunc:
            return level
    return None


@dataclass(frozen=True)
class PointCloud:
    """``points`` is an (N, 4) float32 array of x, y, z, intensity in the sensor frame."""

    points: np.ndarray
    frame_id: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float32)
        if pts.ndim != 2 or pts.shape[1] != 4:
            pts = pts.reshape(-1, 4)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]

    @classmethod
    def empty(cls, frame_id: str = "") -> "PointCloud":
        return cls(np.zeros((0, 4), dtype=np.float32), frame_id)


@dataclass(frozen=True)
class SensorSpec:
    plane_angles: tuple[float, ...]
    delta_theta: float
    mount_height: float
    name: str = ""

    def __post_init__(self):
        angles = tuple(float(a) for a in self.plane_angles)
        object.__setattr__(self, "plane_angles", angles)
        if len(angles) < 1:
            raise ValueError("sensor spec needs at least one plane")
        if any(b <= a for a, b in zip(angles, angles[1:])):
            raise ValueError("plane angles must be strictly increasing (no duplicates)")
        if any(not abs(a) < math.pi / 2 for a in angles):
            raise ValueError("plane angles must lie strictly inside (-90, 90) degrees")
        if not (0.0 < self.delta_theta < math.pi / 2):
            raise ValueError(f"delta_theta must be in (0, pi/2), got {self.delta_theta}")
        if not math.isfinite(self.mount_height):
            raise ValueError("mount_height must be finite")

    @property
    def n_planes(self) -> int:
        return len(self.plane_angles)

    @property
    def n_azimuths(self) -> int:
        """Azimuth steps in one revolution: k * delta_theta for k in [0, 2*pi/delta_theta)."""
        return int(math.ceil(2.0 * math.pi / self.delta_theta - 1e-9))

    def fingerprint(self) -> dict:
        return {
            "plane_angles": list(self.plane_angles),
            "delta_theta": self.delta_theta,
            "mount_height": self.mount_height,
        }

    def with_delta_theta(self, delta_theta: float) -> "SensorSpec":
        return SensorSpec(self.plane_angles, delta_theta, self.mount_height, self.name)


@dataclass(frozen=True)
class Calibration:
    velo_to_cam: np.ndarray  # (3, 4)
    rect: np.ndarray = field(default_factory=lambda: np.eye(3))  # (3, 3)

    def __post_init__(self):
        v2c = np.asarray(self.velo_to_cam, dtype=np.float64).reshape(3, 4)
        r0 = np.asarray(self.rect, dtype=np.float64).reshape(3, 3)
        for name, rot in (("Tr_velo_to_cam", v2c[:, :3]), ("R0_rect", r0)):
            if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
                raise ValueError(f"{name} rotation is not orthonormal")
        object.__setattr__(self, "velo_to_cam", v2c)
        object.__setattr__(self, "rect", r0)

    def velo_to_rect(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        cam = pts @ self.velo_to_cam[:, :3].T + self.velo_to_cam[:, 3]
        return cam @ self.rect.T

    def rect_to_velo(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        cam = pts @ self.rect  # rect is orthonormal: inverse == transpose
        rot = self.velo_to_cam[:, :3]
        return (cam - self.velo_to_cam[:, 3]) @ rot

    @classmethod
    def default(cls) -> "Calibration":
        """Axis permutation only: cam x = -velo y, cam y = -velo z, cam z = velo x."""
        tr = np.array([[0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, 0.0], [1.0, 0.0, 0.0, 0.0]])
        return cls(tr, np.eye(3))


@dataclass(frozen=True)
class GtObject:
    cls: ObjectClass
    box3d: Box3D | None
    truncation: float = 0.0
    occlusion: int = 0
    image_bbox_height: float = 100.0
    rotation_y: float = 0.0
    difficulty: Difficulty | None = None

    def __post_init__(self):
        if self.cls != ObjectClass.DONTCARE and self.box3d is None:
            raise ValueError(f"{self.cls.value} object needs a box")
        if self.difficulty is None and self.cls != ObjectClass.DONTCARE:
            object.__setattr__(
                self, "difficulty", difficulty_of(self.image_bbox_height, self.occlusion, self.truncation)
            )


# ---------------------------------------------------------------- velodyne scans


def read_kitti_bin(path, frame_id: str | None = None) -> PointCloud:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) % 16:
        raise MalformedInputError(f"{path}: size {len(raw)} is not a multiple of 16 bytes")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float32)
    if not np.all(np.isfinite(pts[:, :3])):
        raise MalformedInputError(f"{path}: non-finite coordinates")
    if pts.shape[0] and pts[:, 3].max() > 1.0:
        pts[:, 3] /= np.float32(255.0)
    return PointCloud(pts, path.stem if frame_id is None else frame_id)


def write_kitti_bin(cloud: PointCloud, path) -> None:
    data = np.ascontiguousarray(cloud.points, dtype="<f4").tobytes()
    atomic_write_bytes(path, data)


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


# ---------------------------------------------------------------- calibration


def read_kitti_calib(path) -> Calibration:
    values = {}
    for line in Path(path).read_text().splitlines():
        if ":" not in line:
            continue
        key, rest = line.split(":", 1)
        try:
            values[key.strip()] = np.array([float(v) for v in rest.split()])
        except ValueError as exc:
            raise MalformedInputError(f"{path}: bad calibration entry {key!r}") from exc
    if "Tr_velo_to_cam" not in values:
        raise MalformedInputError(f"{path}: missing Tr_velo_to_cam")
    rect = values.get("R0_rect", np.eye(3).ravel())
    return Calibration(values["Tr_velo_to_cam"].reshape(3, 4), rect.reshape(3, 3))


def format_kitti_calib(calib: Calibration) -> str:
    def fmt(a):
        return " ".join(f"{v:.12e}" for v in np.ravel(a))

    return f"R0_rect: {fmt(calib.rect)}\nTr_velo_to_cam: {fmt(calib.velo_to_cam)}\n"


# ---------------------------------------------------------------- labels


def camera_to_sensor_yaw(rotation_y: float) -> float:
    return wrap_angle(-rotation_y - math.pi / 2)


def sensor_to_camera_yaw(yaw: float) -> float:
    return wrap_angle(-yaw - math.pi / 2)


def camera_box_corners(dims_hwl, location, rotation_y) -> np.ndarray:
    """(8, 3) KITTI box corners in rectified camera coordinates (location = bottom center)."""
    h, w, l = dims_hwl
    x = 0.5 * l * np.array([1, 1, -1, -1, 1, 1, -1, -1])
    y = np.array([0, 0, 0, 0, -h, -h, -h, -h], dtype=np.float64)
    z = 0.5 * w * np.array([1, -1, -1, 1, 1, -1, -1, 1])
    c, s = math.cos(rotation_y), math.sin(rotation_y)
    rot = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return (rot @ np.vstack([x, y, z])).T + np.asarray(location, dtype=np.float64)


def parse_label_line(line: str, calib: Calibration, lineno: int = 0) -> GtObject:
    fields = line.split()
    if len(fields) not in (15, 16):
        raise MalformedInputError(f"line {lineno}: expected 15 fields, got {len(fields)}")
    kind = fields[0]
    try:
        nums = [float(v) for v in fields[1:15]]
    except ValueError as exc:
        raise MalformedInputError(f"line {lineno}: non-numeric field") from exc
    trunc, occ, _alpha, x1, y1, x2, y2, h, w, l, cx, cy, cz, ry = nums
    cls = _KITTI_TYPE_MAP.get(kind)
    if cls is None:
        raise MalformedInputError(f"line {lineno}: unknown object type {kind!r}")
    box = None
    if h > 0 and w > 0 and l > 0:
        bottom = calib.rect_to_velo(np.array([cx, cy, cz]))[0]
        box = Box3D(
            float(bottom[0]), float(bottom[1]), float(bottom[2] + 0.5 * h), l, w, h, camera_to_sensor_yaw(ry)
        )
    elif cls != ObjectClass.DONTCARE:
        raise MalformedInputError(f"line {lineno}: {kind} with non-positive size")
    return GtObject(
        cls=cls,
        box3d=box,
        truncation=trunc,
        occlusion=int(occ),
        image_bbox_height=y2 - y1,
        rotation_y=ry,
    )


def read_kitti_labels(path, calib: Calibration) -> list[GtObject]:
    objects = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if line.strip():
            objects.append(parse_label_line(line, calib, lineno))
    return objects


def format_label_line(obj: GtObject, calib: Calibration, kind: str | None = None) -> str:
    b = obj.box3d
    kind = kind or obj.cls.value
    bottom = calib.velo_to_rect(np.array([b.x, b.y, b.z - 0.5 * b.h]))[0]
    ry = sensor_to_camera_yaw(b.yaw)
    alpha = wrap_angle(ry - math.atan2(bottom[0], bottom[2]))
    y2 = 100.0 + obj.image_bbox_height
    return (
        f"{kind} {obj.truncation:.2f} {obj.occlusion:d} {alpha:.6f} "
        f"0.00 100.00 100.00 {y2:.2f} "
        f"{b.h:.9f} {b.w:.9f} {b.l:.9f} {bottom[0]:.9f} {bottom[1]:.9f} {bottom[2]:.9f} {ry:.9f}"
    )


# ---------------------------------------------------------------- sensor specs

SENSOR_DIR = Path(__file__).with_name("sensors")


def sensor_spec_from_dict(data: dict, name: str = "") -> SensorSpec:
    missing = [k for k in ("plane_angles_deg", "delta_theta_deg", "mount_height_m") if k not in data]
    if missing:
        raise ValueError(f"sensor spec missing field(s): {', '.join(missing)}")
    angles = [math.radians(float(a)) for a in data["plane_angles_deg"]]
    return SensorSpec(
        plane_angles=tuple(angles),
        delta_theta=math.radians(float(data["delta_theta_deg"])),
        mount_height=float(data["mount_height_m"]),
        name=str(data.get("name", name)),
    )


def read_sensor_spec(path) -> SensorSpec:
    path = Path(path)
    data = yaml.safe_load(path.read_text())
    if not isinstance(data, dict):
        raise ValueError(f"{path}: sensor spec must be a mapping")
    return sensor_spec_from_dict(data, name=path.stem)


def builtin_sensor(name: str) -> SensorSpec:
    """One of the checked-in specs: ``vlp16``, ``hdl32e``, ``hdl64e``."""
    path = SENSOR_DIR / f"{name.lower()}.yaml"
    if not path.exists():
        raise ValueError(f"unknown sensor {name!r}; available: {sorted(p.stem for p in SENSOR_DIR.glob('*.yaml'))}")
    return read_sensor_spec(path)


def resolve_sensor(name_or_path) -> SensorSpec:
    p = Path(name_or_path)
    if p.suffix in (".yaml", ".yml", ".json") or p.exists():
        return read_sensor_spec(p)
    return builtin_sensor(str(name_or_path))


def stable_hash(*parts: dict) -> str:
    blob = json.dumps(parts, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
