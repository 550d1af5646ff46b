"""Time the hot kernels with numba on and off.

Each backend runs in its own interpreter so that ``BEVKIT_NO_NUMBA`` selects the
code path exactly as it would for a user. Numba timings exclude JIT compilation
(one warm-up call first).

    python benchmarks/bench_kernels.py [--repeat 3] [--points 120000]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time


def _best(fn, repeat):
    fn()  # warm-up / JIT
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def child(repeat: int, n_points: int) -> dict:
    import numpy as np

    from bevkit import _accel
    from bevkit.bev import BevConfig, encode_bev
    from bevkit.cloud_io import PointCloud, builtin_sensor
    from bevkit.geom import Box3D, iou_matrix_bev
    from bevkit.normmap import compute_normalization_map
    from bevkit.sim import cast_rays, random_scene, scan_directions

    rng = np.random.default_rng(0)
    spec = builtin_sensor("hdl64e")
    cfg = BevConfig()
    small = BevConfig(cell_size=0.2, forward_range=35.0, lateral_range=20.0)
    nmap = compute_normalization_map(spec, cfg)
    pts = np.column_stack([
        rng.uniform(0, 70, n_points), rng.uniform(-40, 40, n_points), rng.uniform(-2, 1, n_points),
        rng.uniform(0, 1, n_points),
    ])
    cloud = PointCloud(pts)
    scene = random_scene(10, spec, seed=0)
    dirs = scan_directions(spec)
    boxes = np.array([[o.box.x, o.box.y, o.box.z, o.box.l, o.box.w, o.box.h, o.box.yaw] for o in scene.objects])
    dets = [Box3D(*rng.uniform(0, 30, 2), -1.0, *rng.uniform(1, 5, 3), rng.uniform(-3, 3)) for _ in range(60)]
    gts = [Box3D(*rng.uniform(0, 30, 2), -1.0, *rng.uniform(1, 5, 3), rng.uniform(-3, 3)) for _ in range(60)]

    return {
        "backend": _accel.backend_name(),
        f"encode_bev ({n_points} pts, 700x800)": _best(lambda: encode_bev(cloud, cfg, nmap), repeat),
        "normalization map (HDL-64, 175x200)": _best(lambda: compute_normalization_map(spec, small), repeat),
        f"cast_rays (HDL-64, {len(dirs)} rays, 10 boxes)": _best(
            lambda: cast_rays(dirs, boxes, -spec.mount_height), repeat
        ),
        "iou_matrix_bev (60x60)": _best(lambda: iou_matrix_bev(dets, gts), repeat),
    }


def run_backend(no_numba: bool, repeat: int, n_points: int) -> dict:
    env = dict(os.environ)
    if no_numba:
        env["BEVKIT_NO_NUMBA"] = "1"
    else:
        env.pop("BEVKIT_NO_NUMBA", None)
    out = subprocess.run(
        [sys.executable, __file__, "--child", "--repeat", str(repeat), "--points", str(n_points)],
        env=env, check=True, capture_output=True, text=True,
    )
    return json.loads(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--points", type=int, default=120_000)
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args(argv)
    if args.child:
        print(json.dumps(child(args.repeat, args.points)))
        return

    fast = run_backend(False, args.repeat, args.points)
    slow = run_backend(True, args.repeat, args.points)
    if fast.pop("backend") != "numba":
        print("numba is not importable here; both columns use the numpy path", file=sys.stderr)
    slow.pop("backend")
    width = max(len(k) for k in fast)
    print(f"{'kernel':<{width}}  {'numba':>10}  {'numpy':>10}  {'speed-up':>8}")
    for name, t_fast in fast.items():
        t_slow = slow[name]
        print(f"{name:<{width}}  {t_fast * 1e3:>8.1f}ms  {t_slow * 1e3:>8.1f}ms  {t_slow / t_fast:>7.1f}x")


if __name__ == "__main__":
    main()
