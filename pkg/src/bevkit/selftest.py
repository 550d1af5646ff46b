"""Quick built-in checks run by ``bevkit selftest``."""

from __future__ import annotations

import math
import time

import numpy as np

from .bev import AnnotatedFrame, BevConfig, encode_bev, flip_horizontal, rotate90, rotate_cloud90
from .cloud_io import PointCloud, SensorSpec, builtin_sensor
from .geom import OrientedBox2D, enclosing_aabb, rotated_iou
from .normmap import compute_normalization_map, plane_counts_for_footprint, raycast_plane_counts
from .recovery import ClassPriors, Detection2D, decode_yaw, encode_yaw, fit_oriented_box


def _check_normmap(rng, n):
    specs = [builtin_sensor(s) for s in ("vlp16", "hdl32e", "hdl64e")]
    ok = 0
    for _ in range(n):
        spec = specs[rng.integers(len(specs))]
        delta = 0.05
        x0 = rng.integers(-600, 600) * delta
        y0 = rng.integers(-600, 600) * delta
        a = plane_counts_for_footprint(spec, x0, x0 + delta, y0, y0 + delta, 3.0)
        b = raycast_plane_counts(spec, x0, x0 + delta, y0, y0 + delta, 3.0)
        ok += bool(np.all(np.abs(a - b) <= 1))
    return ok / n >= 0.99, f"{ok}/{n} cells within +-1 per plane"


def _check_yaw(rng, n):
    worst = 0.0
    for nb in (8, 16):
        for yaw in rng.uniform(-math.pi, math.pi, n):
            d = decode_yaw(encode_yaw(yaw, nb))
            worst = max(worst, abs(math.remainder(d - yaw, 2 * math.pi)))
    return worst <= 1e-9, f"max error {worst:.2e} rad"


def _check_lengths(rng, n):
    priors = ClassPriors()
    worst = 0.0
    for _ in range(n):
        cls = list(priors.widths)[rng.integers(3)]
        w = priors.width(cls)
        l = rng.uniform(max(0.6, w), 5.0)
        yaw = rng.uniform(-math.pi, math.pi)
        if min(abs(math.remainder(yaw, math.pi / 2)), 1.0) < 1e-2:
            continue
        box = OrientedBox2D(rng.uniform(-30, 30), rng.uniform(-30, 30), l, w, yaw)
        out = fit_oriented_box(Detection2D(cls, 1.0, enclosing_aabb(box), yaw=yaw), priors)
        worst = max(worst, abs(out.l - l) / l)
    return worst <= 1e-6, f"max relative length error {worst:.2e}"


def _check_iou(rng, n):
    worst = 0.0
    samples = 200_000
    for _ in range(n):
        a = OrientedBox2D(0.0, 0.0, rng.uniform(1, 4), rng.uniform(1, 4), rng.uniform(-math.pi, math.pi))
        b = OrientedBox2D(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(1, 4), rng.uniform(1, 4), rng.uniform(-math.pi, math.pi))
        u = rng.uniform(-0.5, 0.5, (samples, 2)) * [a.l, a.w]
        c, s = math.cos(a.yaw), math.sin(a.yaw)
        x = c * u[:, 0] - s * u[:, 1]
        y = s * u[:, 0] + c * u[:, 1]
        cb, sb = math.cos(b.yaw), math.sin(b.yaw)
        ub = cb * (x - b.cx) + sb * (y - b.cy)
        vb = -sb * (x - b.cx) + cb * (y - b.cy)
        inter = np.mean((np.abs(ub) <= b.l / 2) & (np.abs(vb) <= b.w / 2)) * a.area
        mc = inter / (a.area + b.area - inter)
        worst = max(worst, abs(mc - rotated_iou(a, b)))
    return worst <= 0.01, f"max |clip - monte carlo| {worst:.4f}"


def _check_augment(rng, n):
    cfg = BevConfig.full360(10.0)
    spec = SensorSpec(tuple(np.radians([-10.0, -5.0, 0.0, 5.0])), math.radians(0.2), 1.73)
    nmap = compute_normalization_map(spec, cfg)
    ok = True
    for _ in range(n):
        pts = np.column_stack(
            [rng.uniform(-10, 10, (2000, 2)), rng.uniform(-1.73, 1.27, 2000), rng.uniform(0, 1, 2000)]
        )
        cloud = PointCloud(pts)
        base = AnnotatedFrame(encode_bev(cloud, cfg, nmap))
        for k in (1, 2, 3):
            ok &= np.array_equal(encode_bev(rotate_cloud90(cloud, k), cfg, nmap).data, rotate90(base, k).bev.data)
        ok &= np.array_equal(flip_horizontal(flip_horizontal(base)).bev.data, base.bev.data)
    return bool(ok), "rotate/encode commute; flip is an involution"


def run_selftest(seed: int = 0, quick: bool = True) -> bool:
    rng = np.random.default_rng(seed)
    scale = 1 if quick else 10
    checks = [
        ("normalization map vs ray cast", _check_normmap, 500 * scale),
        ("yaw codec round trip", _check_yaw, 1000 * scale),
        ("length recovery round trip", _check_lengths, 1000 * scale),
        ("rotated IoU vs Monte Carlo", _check_iou, 20 * scale),
        ("augmentation exactness", _check_augment, 5 * scale),
    ]
    all_ok = True
    for name, fn, n in checks:
        t = time.perf_counter()
        ok, detail = fn(rng, n)
        all_ok &= ok
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail} ({time.perf_counter() - t:.2f}s)")
    return all_ok
