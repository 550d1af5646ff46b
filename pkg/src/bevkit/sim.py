"""Ray-cast LiDAR over upright boxes and a flat ground plane.

Also hosts the brute-force column-hit counter that checks the normalization map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from ._accel import USE_NUMBA, njit
from .cloud_io import GtObject, ObjectClass, PointCloud, SensorSpec
from .geom import Aabb2D, Box3D, OrientedBox2D, enclosing_aabb, rotated_iou
from .recovery import ClassPriors, Detection2D, encode_yaw

_PARALLEL_EPS = 1e-15


@dataclass(frozen=True)
class SceneObject:
    box: Box3D
    cls: ObjectClass = ObjectClass.CAR
    reflectivity: float = 0.5


@dataclass(frozen=True)
class Scene:
    """Boxes in the sensor frame; the ground is the plane z = -mount_height."""

    objects: tuple[SceneObject, ...] = ()
    ground_reflectivity: float = 0.2
    ground: bool = True

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))


@dataclass(frozen=True)
class NoiseConfig:
    sigma_center: float = 0.0
    sigma_size: float = 0.0
    sigma_yaw: float = 0.0
    seed: int = 0


# ---------------------------------------------------------------- kernels


@njit
def _slab(ox, oy, oz, dx, dy, dz, hx, hy, hz, t_max):
    # Ray vs box [-hx,hx]x[-hy,hy]x[-hz,hz]; returns entry t or inf.
    t0 = 0.0
    t1 = t_max
    for axis in range(3):
        if axis == 0:
            o, d, h = ox, dx, hx
        elif axis == 1:
            o, d, h = oy, dy, hy
        else:
            o, d, h = oz, dz, hz
        if abs(d) < _PARALLEL_EPS:
            if o < -h or o > h:
                return math.inf
        else:
            ta = (-h - o) / d
            tb = (h - o) / d
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
            if t0 > t1:
                return math.inf
    return t0


@njit
def _cast_numba(dirs, boxes, ground_z, max_range):
    n = dirs.shape[0]
    t_hit = np.full(n, math.inf)
    hit_id = np.full(n, -1, dtype=np.int64)
    nb = boxes.shape[0]
    cs = np.cos(boxes[:, 6])
    sn = np.sin(boxes[:, 6])
    for i in range(n):
        dx, dy, dz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        best = max_range
        who = -1
        if dz < 0.0:
            tg = ground_z / dz
            if tg <= best:
                best = tg
                who = -2
        for b in range(nb):
            bx, by, bz = boxes[b, 0], boxes[b, 1], boxes[b, 2]
            ox = cs[b] * (-bx) + sn[b] * (-by)
            oy = -sn[b] * (-bx) + cs[b] * (-by)
            lx = cs[b] * dx + sn[b] * dy
            ly = -sn[b] * dx + cs[b] * dy
            t = _slab(ox, oy, -bz, lx, ly, dz, 0.5 * boxes[b, 3], 0.5 * boxes[b, 4], 0.5 * boxes[b, 5], best)
            if t > 0.0 and t < best:
                best = t
                who = b
        if who != -1:
            t_hit[i] = best
            hit_id[i] = who
    return t_hit, hit_id


def _slab_numpy(o, d, h, t_max):
    n = d.shape[0]
    t0 = np.zeros(n)
    t1 = np.full(n, t_max) if np.isscalar(t_max) else t_max.copy()
    miss = np.zeros(n, dtype=bool)
    for axis in range(3):
        oa = o[axis]
        da = d[:, axis]
        par = np.abs(da) < _PARALLEL_EPS
        miss |= par & ((oa < -h[axis]) | (oa > h[axis]))
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = np.where(par, -np.inf, (-h[axis] - oa) / da)
            tb = np.where(par, np.inf, (h[axis] - oa) / da)
        lo = np.minimum(ta, tb)
        hi = np.maximum(ta, tb)
        t0 = np.maximum(t0, lo)
        t1 = np.minimum(t1, hi)
    miss |= t0 > t1
    return np.where(miss, np.inf, t0)


def _cast_numpy(dirs, boxes, ground_z, max_range):
    n = dirs.shape[0]
    best = np.full(n, max_range, dtype=np.float64)
    who = np.full(n, -1, dtype=np.int64)
    down = dirs[:, 2] < 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = np.where(down, ground_z / dirs[:, 2], np.inf)
    g = down & (tg <= best)
    best = np.where(g, tg, best)
    who[g] = -2
    for b in range(boxes.shape[0]):
        bx, by, bz, l, w, h, yaw = boxes[b]
        c, s = math.cos(yaw), math.sin(yaw)
        o = (c * -bx + s * -by, -s * -bx + c * -by, -bz)
        local = np.column_stack([c * dirs[:, 0] + s * dirs[:, 1], -s * dirs[:, 0] + c * dirs[:, 1], dirs[:, 2]])
        t = _slab_numpy(o, local, (0.5 * l, 0.5 * w, 0.5 * h), best)
        closer = (t > 0.0) & (t < best)
        best = np.where(closer, t, best)
        who[closer] = b
    t_hit = np.where(who != -1, best, np.inf)
    return t_hit, who


def cast_rays(dirs, boxes, ground_z, max_range=200.0, use_numba=None):
    """First hit along unit directions from the origin.

    Returns (t, id) with id = box index, -2 for ground, -1 for no return.
    """
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 7)
    if use_numba is None:
        use_numba = USE_NUMBA
    kernel = _cast_numba if use_numba else _cast_numpy
    return kernel(dirs, boxes, float(ground_z), float(max_range))


def scan_directions(spec: SensorSpec) -> np.ndarray:
    """Unit ray directions, plane-major then azimuth-minor."""
    phi = np.asarray(spec.plane_angles)[:, None]
    theta = (np.arange(spec.n_azimuths) * spec.delta_theta)[None, :]
    cphi = np.cos(phi)
    d = np.stack(
        [cphi * np.cos(theta), cphi * np.sin(theta), np.broadcast_to(np.sin(phi), (phi.shape[0], theta.shape[1]))],
        axis=-1,
    )
    return d.reshape(-1, 3)


def simulate_scan(
    scene: Scene,
    spec: SensorSpec,
    dropout: float = 0.0,
    seed: int = 0,
    max_range: float = 200.0,
    use_numba: bool | None = None,
    frame_id: str = "",
) -> PointCloud:
    dirs = scan_directions(spec)
    boxes = np.array(
        [[o.box.x, o.box.y, o.box.z, o.box.l, o.box.w, o.box.h, o.box.yaw] for o in scene.objects], dtype=np.float64
    ).reshape(-1, 7)
    ground_z = -spec.mount_height if scene.ground else -1e12
    t, who = cast_rays(dirs, boxes, ground_z, max_range, use_numba)
    hit = who != -1
    if not scene.ground:
        hit &= who != -2
    refl = np.array([o.reflectivity for o in scene.objects] + [scene.ground_reflectivity], dtype=np.float64)
    pts = dirs[hit] * t[hit, None]
    inten = refl[np.where(who[hit] == -2, len(scene.objects), who[hit])]
    cloud = np.column_stack([pts, inten]).astype(np.float32)
    if dropout > 0.0:
        rng = np.random.default_rng(seed)
        cloud = cloud[rng.random(cloud.shape[0]) >= dropout]
    return PointCloud(cloud, frame_id)


@njit
def _count_column_hits(angles, delta_theta, n_az, mount_height, x0, x1, y0, y1, h_top):
    # Sensor at (0, 0, mount_height) over ground z = 0; column [x0,x1]x[y0,y1]x[0,h_top].
    n_p = angles.shape[0]
    out = np.zeros(n_p, dtype=np.int64)
    cx = 0.5 * (x0 + x1)
    cy = 0.5 * (y0 + y1)
    hx = 0.5 * (x1 - x0)
    hy = 0.5 * (y1 - y0)
    hz = 0.5 * h_top
    oz = mount_height - hz
    all_az = x0 <= 0.0 <= x1 and y0 <= 0.0 <= y1
    k_lo = 0
    k_hi = n_az - 1
    if not all_az:
        ref = math.atan2(cy, cx)
        lo = math.inf
        hi = -math.inf
        for k in range(4):
            vx = x0 if (k == 0 or k == 3) else x1
            vy = y0 if k < 2 else y1
            a = math.atan2(vy, vx) - ref
            if a > math.pi:
                a -= 2.0 * math.pi
            elif a < -math.pi:
                a += 2.0 * math.pi
            lo = min(lo, a)
            hi = max(hi, a)
        k_lo = int(math.floor((ref + lo) / delta_theta)) - 2
        k_hi = int(math.ceil((ref + hi) / delta_theta)) + 2
    for p in range(n_p):
        cphi = math.cos(angles[p])
        dz = math.sin(angles[p])
        t_max = math.inf
        if dz < 0.0:
            t_max = mount_height / -dz
        for kk in range(k_lo, k_hi + 1):
            k = kk % n_az
            if not all_az and (kk - k_lo) >= n_az:
                break
            th = k * delta_theta
            dx = cphi * math.cos(th)
            dy = cphi * math.sin(th)
            t = _slab(-cx, -cy, oz, dx, dy, dz, hx, hy, hz, t_max)
            if t < math.inf:
                out[p] += 1
    return out


# ---------------------------------------------------------------- oracle detector


def oracle_detections(
    gts,
    priors: ClassPriors | None = None,
    noise: NoiseConfig | None = None,
    n_bins: int = 16,
    frame_id: str = "",
) -> list[Detection2D]:
    """Perfect (or perturbed) axis-aligned detections derived from ground truth."""
    noise = noise or NoiseConfig()
    rng = np.random.default_rng(noise.seed)
    out = []
    for gt in gts:
        if gt.cls == ObjectClass.DONTCARE or gt.box3d is None:
            continue
        b = gt.box3d
        yaw = b.yaw + (rng.normal(0.0, noise.sigma_yaw) if noise.sigma_yaw else 0.0)
        aabb = enclosing_aabb(OrientedBox2D(b.x, b.y, b.l, b.w, b.yaw))
        if noise.sigma_center or noise.sigma_size:
            dc = rng.normal(0.0, noise.sigma_center, 2) if noise.sigma_center else (0.0, 0.0)
            ds = rng.normal(0.0, noise.sigma_size, 2) if noise.sigma_size else (0.0, 0.0)
            aabb = Aabb2D(
                aabb.cx + dc[0], aabb.cy + dc[1], max(1e-3, aabb.h_bbox + ds[0]), max(1e-3, aabb.w_bbox + ds[1])
            )
        out.append(Detection2D(gt.cls, 1.0, aabb, yaw_bins=encode_yaw(yaw, n_bins), frame_id=frame_id))
    return out


# ---------------------------------------------------------------- scenes


CLASS_SIZES = {
    # (length range, nominal width, height range)
    ObjectClass.CAR: ((3.5, 4.8), 1.8, (1.4, 1.7)),
    ObjectClass.PEDESTRIAN: ((0.5, 0.9), 0.6, (1.5, 1.9)),
    ObjectClass.CYCLIST: ((1.5, 1.9), 0.6, (1.5, 1.8)),
}


def random_scene(
    n_objects: int,
    spec: SensorSpec,
    seed: int = 0,
    x_range=(5.0, 33.0),
    y_limit: float = 18.0,
    half_fov: float = math.radians(50.0),
    width_jitter: float = 0.05,
    min_points: int = 20,
    classes=(ObjectClass.CAR, ObjectClass.PEDESTRIAN, ObjectClass.CYCLIST),
    max_rounds: int = 200,
) -> Scene:
    """Non-overlapping upright objects on the ground, each hit by at least ``min_points`` rays.

    Objects lie within ``x_range``, ``|y| <= y_limit`` and ``half_fov`` of the
    forward axis. Widths deviate from the class prior by at most ``width_jitter``
    (relative). Hidden objects are dropped and replaced until the scene is full.
    """
    rng = np.random.default_rng(seed)
    placed: list[SceneObject] = []

    def draw():
        while True:
            cls = classes[rng.integers(len(classes))]
            (l_lo, l_hi), w0, (h_lo, h_hi) = CLASS_SIZES[cls]
            r = rng.uniform(*x_range)
            ang = rng.uniform(-half_fov, half_fov)
            x, y = r * math.cos(ang), r * math.sin(ang)
            l = rng.uniform(l_lo, l_hi)
            w = w0 * (1.0 + rng.uniform(-width_jitter, width_jitter))
            h = rng.uniform(h_lo, h_hi)
            yaw = rng.uniform(-math.pi, math.pi)
            reach = 0.5 * math.hypot(l, w)
            if abs(y) + reach > y_limit or x - reach < x_range[0] or x + reach > x_range[1]:
                continue
            box = Box3D(x, y, -spec.mount_height + 0.5 * h, l, w, h, yaw)
            fp = box.footprint()
            grown = OrientedBox2D(fp.cx, fp.cy, fp.l + 0.6, fp.w + 0.6, fp.yaw)
            if any(rotated_iou(grown, o.box.footprint()) > 0.0 for o in placed):
                continue
            return SceneObject(box, cls, float(rng.uniform(0.2, 0.9)))

    for _ in range(max_rounds):
        while len(placed) < n_objects:
            placed.append(draw())
        cloud = simulate_scan(Scene(placed), spec)
        visible = [o for o in placed if _points_on(cloud, o.box) >= min_points]
        if len(visible) == n_objects:
            return Scene(placed)
        # drop at most one hidden object per round, keep the rest in place
        hidden = [o for o in placed if o not in visible]
        placed.remove(hidden[-1])
    raise RuntimeError(f"could not build a scene with {n_objects} visible objects")


def _points_on(cloud: PointCloud, box: Box3D, tol: float = 1e-4) -> int:
    pts = cloud.points.astype(np.float64)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx = pts[:, 0] - box.x
    dy = pts[:, 1] - box.y
    u = c * dx + s * dy
    v = -s * dx + c * dy
    dz = pts[:, 2] - box.z
    inside = (np.abs(u) <= 0.5 * box.l + tol) & (np.abs(v) <= 0.5 * box.w + tol) & (np.abs(dz) <= 0.5 * box.h + tol)
    return int(inside.sum())


def scene_ground_truth(scene: Scene, image_bbox_height: float = 100.0) -> list[GtObject]:
    return [GtObject(o.cls, o.box, image_bbox_height=image_bbox_height) for o in scene.objects]


def read_scene(path, spec: SensorSpec | None = None) -> Scene:
    """YAML scene: ``objects`` with center/size/yaw/class/reflectivity.

    An object without a center z (``center: [x, y]``) is placed on the ground,
    which needs ``spec`` for the mount height.
    """
    data = yaml.safe_load(Path(path).read_text()) or {}
    objects = []
    for i, item in enumerate(data.get("objects", [])):
        try:
            l, w, h = (float(v) for v in item["size"])
            center = [float(v) for v in item["center"]]
            if len(center) == 2:
                if spec is None:
                    raise ValueError("ground placement needs a sensor spec")
                center.append(-spec.mount_height + 0.5 * h)
            box = Box3D(center[0], center[1], center[2], l, w, h, float(item.get("yaw", 0.0)))
            objects.append(
                SceneObject(box, ObjectClass(item.get("class", "Car")), float(item.get("reflectivity", 0.5)))
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}: bad object #{i}: {exc}") from exc
    return Scene(
        objects,
        ground_reflectivity=float(data.get("ground_reflectivity", 0.2)),
        ground=bool(data.get("ground", True)),
    )


def write_scene(scene: Scene, path) -> None:
    data = {
        "ground_reflectivity": scene.ground_reflectivity,
        "ground": scene.ground,
        "objects": [
            {
                "class": o.cls.value,
                "center": [o.box.x, o.box.y, o.box.z],
                "size": [o.box.l, o.box.w, o.box.h],
                "yaw": o.box.yaw,
                "reflectivity": o.reflectivity,
            }
            for o in scene.objects
        ],
    }
    Path(path).write_text(yaml.safe_dump(data, sort_keys=False))
