"""Per-cell maximum LiDAR return counts for sensor-independent density.

Every BEV cell is treated as a solid column with the cell footprint and height
``h_top`` above the ground. A laser plane at elevation ``phi`` is a cone; seen
from above it stays inside the slab ``0 <= z <= h_top`` over a radial band
``[r_in, r_out]``. The plane's contribution to a cell is the azimuth span of
the footprint inside that band divided by the horizontal resolution, rounded up.
"""

from __future__ import annotations

import enum
import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._accel import USE_NUMBA, njit
from .bev import BevConfig
from .cloud_io import SensorSpec, atomic_write_bytes, stable_hash

TWO_PI = 2.0 * math.pi
_FLAT_TAN = 1e-6
_CACHE_MAGIC = b"BEVNMAP1"


class IntersectionCase(enum.Enum):
    OUTSIDE = "outside"
    ALL_INSIDE = "all_inside"
    TWO_POINT = "two_point"


@dataclass(frozen=True)
class CellIntersection:
    case: IntersectionCase
    theta_0: float = 0.0
    theta_n: float = 0.0
    p1: tuple[float, float] | None = None
    p2: tuple[float, float] | None = None
    points: tuple[tuple[float, float], ...] = ()

    @property
    def span(self) -> float:
        return (self.theta_n - self.theta_0) % TWO_PI if self.case != IntersectionCase.OUTSIDE else 0.0


def azimuth(x: float, y: float) -> float:
    """Four-quadrant azimuth from the forward (x) axis toward y, in [0, 2*pi)."""
    a = math.atan2(y, x)
    return a + TWO_PI if a < 0 else a


def _square_circle_points(x0, x1, y0, y1, d):
    out = []
    for xe in (x0, x1):
        rem = d * d - xe * xe
        if rem >= 0:
            s = math.sqrt(rem)
            for ye in (-s, s):
                if y0 <= ye <= y1:
                    out.append((xe, ye))
    for ye in (y0, y1):
        rem = d * d - ye * ye
        if rem >= 0:
            s = math.sqrt(rem)
            for xe in (-s, s):
                if x0 < xe < x1:
                    out.append((xe, ye))
    return out


def circle_square_intersection(d: float, cell_square, sensor_xy=(0.0, 0.0)) -> CellIntersection:
    """Top-view cut between the circle of radius ``d`` around the sensor and a cell.

    ``cell_square`` is ``(x_min, y_min, side)``. Angles follow :func:`azimuth`;
    ``theta_0``/``theta_n`` bound the part of the square inside the disk, in
    counter-clockwise order. In the two-point case ``p1``/``p2`` are the circle
    crossings at the extremes of that span.
    """
    x_min, y_min, side = cell_square
    if not side > 0:
        raise ValueError("cell side must be positive")
    if not d > 0:
        raise ValueError("radius must be positive")
    sx, sy = sensor_xy
    x0, y0 = x_min - sx, y_min - sy
    x1, y1 = x0 + side, y0 + side
    verts = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
    inside = [math.hypot(vx, vy) <= d for vx, vy in verts]
    nx = min(max(0.0, x0), x1)
    ny = min(max(0.0, y0), y1)
    near = math.hypot(nx, ny)

    if all(inside):
        cands = verts
        crossings = []
    elif not any(inside) and near > d:
        return CellIntersection(IntersectionCase.OUTSIDE)
    else:
        crossings = _square_circle_points(x0, x1, y0, y1, d)
        cands = [v for v, ok in zip(verts, inside) if ok] + crossings

    if x0 < 0 < x1 and y0 < 0 < y1:
        t0, tn = 0.0, TWO_PI
        lo_pt = hi_pt = None
    else:
        ref = math.atan2(0.5 * (y0 + y1), 0.5 * (x0 + x1))
        rel = [math.remainder(math.atan2(py, px) - ref, TWO_PI) for px, py in cands if px or py]
        i_lo = int(np.argmin(rel))
        i_hi = int(np.argmax(rel))
        nz = [p for p in cands if p[0] or p[1]]
        lo_pt, hi_pt = nz[i_lo], nz[i_hi]
        t0 = azimuth(*lo_pt)
        tn = azimuth(*hi_pt)
    shift = lambda p: (p[0] + sx, p[1] + sy)  # noqa: E731
    if all(inside):
        return CellIntersection(IntersectionCase.ALL_INSIDE, t0, tn)
    if lo_pt is not None and lo_pt in crossings and hi_pt in crossings:
        p1, p2 = shift(lo_pt), shift(hi_pt)
    else:
        ordered = sorted(crossings, key=lambda p: azimuth(*p))
        p1 = shift(ordered[0]) if ordered else None
        p2 = shift(ordered[-1]) if ordered else None
    return CellIntersection(
        IntersectionCase.TWO_POINT, t0, tn, p1, p2, tuple(shift(p) for p in crossings)
    )


# ---------------------------------------------------------------- kernels


@njit
def radial_band(phi, mount_height, h_top):
    """Horizontal distances over which a plane stays inside the cell slab.

    Returns (r_in, r_out); r_in > r_out means the plane never enters the slab.
    """
    t = math.tan(phi)
    hs = mount_height
    if abs(t) < _FLAT_TAN:
        if 0.0 <= hs <= h_top:
            return 0.0, math.inf
        return 1.0, 0.0
    if t < 0.0:
        if hs < 0.0:
            return 1.0, 0.0
        return max(0.0, (hs - h_top) / -t), hs / -t
    if hs > h_top:
        return 1.0, 0.0
    return max(0.0, -hs / t), (h_top - hs) / t


@njit
def _canonical(x0, x1, y0, y1):
    # Reflect/swap the footprint into a fixed orientation; only sign flips and swaps.
    if x0 + x1 < 0.0:
        x0, x1 = -x1, -x0
    if y0 + y1 < 0.0:
        y0, y1 = -y1, -y0
    if x0 > y0 or (x0 == y0 and x1 > y1):
        x0, x1, y0, y1 = y0, y1, x0, x1
    return x0, x1, y0, y1


@njit
def _consider(px, py, ref, lo, hi):
    a = math.atan2(py, px) - ref
    if a > math.pi:
        a -= TWO_PI
    elif a < -math.pi:
        a += TWO_PI
    if a < lo:
        lo = a
    if a > hi:
        hi = a
    return lo, hi


@njit
def _circle_edges(x0, x1, y0, y1, d, ref, lo, hi):
    d2 = d * d
    for xe in (x0, x1):
        rem = d2 - xe * xe
        if rem >= 0.0:
            s = math.sqrt(rem)
            if y0 <= s <= y1:
                lo, hi = _consider(xe, s, ref, lo, hi)
            if y0 <= -s <= y1:
                lo, hi = _consider(xe, -s, ref, lo, hi)
    for ye in (y0, y1):
        rem = d2 - ye * ye
        if rem >= 0.0:
            s = math.sqrt(rem)
            if x0 <= s <= x1:
                lo, hi = _consider(s, ye, ref, lo, hi)
            if x0 <= -s <= x1:
                lo, hi = _consider(-s, ye, ref, lo, hi)
    return lo, hi


@njit
def band_extent(x0, x1, y0, y1, r_in, r_out):
    """Azimuth span of footprint [x0,x1]x[y0,y1] intersected with the annulus r_in <= r <= r_out.

    Returns -1.0 when the two regions do not meet, 2*pi when the footprint holds the sensor.
    """
    if r_in > r_out:
        return -1.0
    x0, x1, y0, y1 = _canonical(x0, x1, y0, y1)
    nx = min(max(0.0, x0), x1)
    ny = min(max(0.0, y0), y1)
    near = math.hypot(nx, ny)
    fx = max(abs(x0), abs(x1))
    fy = max(abs(y0), abs(y1))
    far = math.hypot(fx, fy)
    if near > r_out or far < r_in:
        return -1.0
    if x0 < 0.0 < x1 and y0 < 0.0 < y1:
        return TWO_PI
    ref = math.atan2(0.5 * (y0 + y1), 0.5 * (x0 + x1))
    lo = math.inf
    hi = -math.inf
    for k in range(4):
        vx = x0 if (k == 0 or k == 3) else x1
        vy = y0 if k < 2 else y1
        rv = math.hypot(vx, vy)
        if rv > 0.0 and r_in <= rv <= r_out:
            lo, hi = _consider(vx, vy, ref, lo, hi)
    if r_in > 0.0:
        lo, hi = _circle_edges(x0, x1, y0, y1, r_in, ref, lo, hi)
    if r_out < math.inf:
        lo, hi = _circle_edges(x0, x1, y0, y1, r_out, ref, lo, hi)
    if hi < lo:
        return -1.0
    return hi - lo


@njit
def _count_from_extent(extent, delta_theta, n_az):
    if extent < 0.0:
        return 0
    if extent >= TWO_PI:
        return n_az
    c = int(math.ceil(extent / delta_theta))
    return min(c, n_az)


@njit
def _plane_counts_numba(x_lo, x_hi, y_lo, y_hi, r_in, r_out, delta_theta, n_az):
    rows = x_lo.shape[0]
    cols = y_lo.shape[0]
    out = np.zeros((rows, cols), dtype=np.uint32)
    for p in range(r_in.shape[0]):
        if r_in[p] > r_out[p]:
            continue
        for i in range(rows):
            for j in range(cols):
                e = band_extent(x_lo[i], x_hi[i], y_lo[j], y_hi[j], r_in[p], r_out[p])
                out[i, j] += _count_from_extent(e, delta_theta, n_az)
    return out


# ---------------------------------------------------------------- numpy path


def _np_consider(px, py, ref, valid, lo, hi):
    a = np.arctan2(py, px) - ref
    a = np.where(a > math.pi, a - TWO_PI, np.where(a < -math.pi, a + TWO_PI, a))
    lo = np.where(valid & (a < lo), a, lo)
    hi = np.where(valid & (a > hi), a, hi)
    return lo, hi


def _np_circle_edges(x0, x1, y0, y1, d, ref, lo, hi, active):
    d2 = d * d
    for xe in (x0, x1):
        rem = d2 - xe * xe
        ok = active & (rem >= 0.0)
        s = np.sqrt(np.where(ok, rem, 0.0))
        for sv in (s, -s):
            lo, hi = _np_consider(xe, sv, ref, ok & (y0 <= sv) & (sv <= y1), lo, hi)
    for ye in (y0, y1):
        rem = d2 - ye * ye
        ok = active & (rem >= 0.0)
        s = np.sqrt(np.where(ok, rem, 0.0))
        for sv in (s, -s):
            lo, hi = _np_consider(sv, ye, ref, ok & (x0 <= sv) & (sv <= x1), lo, hi)
    return lo, hi


def band_extent_numpy(x0, x1, y0, y1, r_in, r_out):
    """Vectorized :func:`band_extent` over broadcastable footprint arrays."""
    x0, x1, y0, y1 = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (x0, x1, y0, y1)))
    fx = x0 + x1 < 0.0
    x0, x1 = np.where(fx, -x1, x0), np.where(fx, -x0, x1)
    fy = y0 + y1 < 0.0
    y0, y1 = np.where(fy, -y1, y0), np.where(fy, -y0, y1)
    sw = (x0 > y0) | ((x0 == y0) & (x1 > y1))
    x0, x1, y0, y1 = (np.where(sw, y0, x0), np.where(sw, y1, x1), np.where(sw, x0, y0), np.where(sw, x1, y1))
    out = np.full(x0.shape, -1.0)
    if r_in > r_out:
        return out
    nx = np.clip(0.0, x0, x1)
    ny = np.clip(0.0, y0, y1)
    near = np.hypot(nx, ny)
    far = np.hypot(np.maximum(np.abs(x0), np.abs(x1)), np.maximum(np.abs(y0), np.abs(y1)))
    active = ~((near > r_out) | (far < r_in))
    holds = active & (x0 < 0.0) & (0.0 < x1) & (y0 < 0.0) & (0.0 < y1)
    active &= ~holds
    ref = np.arctan2(0.5 * (y0 + y1), 0.5 * (x0 + x1))
    lo = np.full(x0.shape, np.inf)
    hi = np.full(x0.shape, -np.inf)
    for vx, vy in ((x0, y0), (x1, y0), (x1, y1), (x0, y1)):
        rv = np.hypot(vx, vy)
        lo, hi = _np_consider(vx, vy, ref, active & (rv > 0.0) & (rv >= r_in) & (rv <= r_out), lo, hi)
    if r_in > 0.0:
        lo, hi = _np_circle_edges(x0, x1, y0, y1, r_in, ref, lo, hi, active)
    if r_out < math.inf:
        lo, hi = _np_circle_edges(x0, x1, y0, y1, r_out, ref, lo, hi, active)
    ext = np.where(active & (hi >= lo), hi - lo, -1.0)
    return np.where(holds, TWO_PI, ext)


def _plane_counts_numpy(x_lo, x_hi, y_lo, y_hi, r_in, r_out, delta_theta, n_az):
    out = np.zeros((x_lo.shape[0], y_lo.shape[0]), dtype=np.uint32)
    X0, Y0 = x_lo[:, None], y_lo[None, :]
    X1, Y1 = x_hi[:, None], y_hi[None, :]
    for p in range(r_in.shape[0]):
        ext = band_extent_numpy(X0, X1, Y0, Y1, r_in[p], r_out[p])
        cnt = np.where(ext < 0.0, 0, np.minimum(np.ceil(ext / delta_theta), n_az))
        cnt = np.where(ext >= TWO_PI, n_az, cnt)
        out += cnt.astype(np.uint32)
    return out


# ---------------------------------------------------------------- public API


@dataclass(frozen=True, eq=False)
class NormalizationMap:
    grid: np.ndarray  # (rows, cols) uint32
    sensor_hash: str
    cfg: BevConfig | None = None

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.uint32)
        g.setflags(write=False)
        object.__setattr__(self, "grid", g)

    @property
    def shape(self):
        return self.grid.shape


def sensor_hash(spec: SensorSpec, cfg: BevConfig) -> str:
    return stable_hash(spec.fingerprint(), cfg.fingerprint())


def _bands(spec: SensorSpec, h_top: float):
    r_in = np.empty(spec.n_planes)
    r_out = np.empty(spec.n_planes)
    for p, phi in enumerate(spec.plane_angles):
        r_in[p], r_out[p] = radial_band(phi, spec.mount_height, h_top)
    return r_in, r_out


def plane_cell_count(spec: SensorSpec, plane_index: int, cell, cfg: BevConfig) -> int:
    """Maximum returns one plane can put into cell ``(row, col)``."""
    i, j = cell
    rows, cols = cfg.shape
    if not (0 <= plane_index < spec.n_planes):
        raise IndexError(f"plane index {plane_index} out of range")
    if not (0 <= i < rows and 0 <= j < cols):
        raise IndexError(f"cell {cell} outside grid {cfg.shape}")
    x_lo, x_hi = cfg.row_edges()
    y_lo, y_hi = cfg.col_edges()
    r_in, r_out = radial_band(spec.plane_angles[plane_index], spec.mount_height, cfg.h_top)
    ext = band_extent(x_lo[i], x_hi[i], y_lo[j], y_hi[j], r_in, r_out)
    return int(_count_from_extent(ext, spec.delta_theta, spec.n_azimuths))


def plane_counts_for_footprint(spec: SensorSpec, x0, x1, y0, y1, h_top) -> np.ndarray:
    """Per-plane counts for an arbitrary footprint; same rule as :func:`plane_cell_count`."""
    out = np.zeros(spec.n_planes, dtype=np.int64)
    for p, phi in enumerate(spec.plane_angles):
        r_in, r_out = radial_band(phi, spec.mount_height, h_top)
        out[p] = _count_from_extent(band_extent(x0, x1, y0, y1, r_in, r_out), spec.delta_theta, spec.n_azimuths)
    return out


def compute_normalization_map(spec: SensorSpec, cfg: BevConfig, use_numba: bool | None = None) -> NormalizationMap:
    x_lo, x_hi = cfg.row_edges()
    y_lo, y_hi = cfg.col_edges()
    r_in, r_out = _bands(spec, cfg.h_top)
    if use_numba is None:
        use_numba = USE_NUMBA
    kernel = _plane_counts_numba if use_numba else _plane_counts_numpy
    grid = kernel(x_lo, x_hi, y_lo, y_hi, r_in, r_out, spec.delta_theta, spec.n_azimuths)
    return NormalizationMap(grid, sensor_hash(spec, cfg), cfg)


def raycast_plane_counts(spec: SensorSpec, x0, x1, y0, y1, h_top) -> np.ndarray:
    """Brute force: per plane, how many azimuth steps k*dtheta hit the solid column."""
    from .sim import _count_column_hits

    return _count_column_hits(
        np.asarray(spec.plane_angles, dtype=np.float64),
        spec.delta_theta,
        spec.n_azimuths,
        spec.mount_height,
        float(x0),
        float(x1),
        float(y0),
        float(y1),
        float(h_top),
    )


def raycast_reference_count(spec: SensorSpec, cfg: BevConfig, cell) -> int:
    i, j = cell
    x_lo, x_hi = cfg.row_edges()
    y_lo, y_hi = cfg.col_edges()
    return int(raycast_plane_counts(spec, x_lo[i], x_hi[i], y_lo[j], y_hi[j], cfg.h_top).sum())


# ---------------------------------------------------------------- disk cache


def save_normalization_map(nmap: NormalizationMap, path) -> None:
    """Header (magic, rows, cols, cell size, 64-char hash) then row-major little-endian uint32."""
    rows, cols = nmap.grid.shape
    cell = nmap.cfg.cell_size if nmap.cfg is not None else 0.0
    buf = io.BytesIO()
    buf.write(_CACHE_MAGIC)
    buf.write(struct.pack("<IId", rows, cols, cell))
    buf.write(nmap.sensor_hash.encode("ascii").ljust(64, b"\0")[:64])
    buf.write(np.ascontiguousarray(nmap.grid, dtype="<u4").tobytes())
    atomic_write_bytes(path, buf.getvalue())


def load_normalization_map(path, cfg: BevConfig | None = None) -> NormalizationMap:
    raw = Path(path).read_bytes()
    head = len(_CACHE_MAGIC) + 16 + 64
    if len(raw) < head or raw[: len(_CACHE_MAGIC)] != _CACHE_MAGIC:
        raise ValueError(f"{path}: not a normalization map cache")
    rows, cols, cell = struct.unpack("<IId", raw[len(_CACHE_MAGIC) : len(_CACHE_MAGIC) + 16])
    digest = raw[len(_CACHE_MAGIC) + 16 : head].rstrip(b"\0").decode("ascii")
    body = raw[head:]
    if len(body) != 4 * rows * cols:
        raise ValueError(f"{path}: truncated normalization map")
    grid = np.frombuffer(body, dtype="<u4").reshape(rows, cols).astype(np.uint32)
    if cfg is not None and (cfg.shape != (rows, cols) or abs(cfg.cell_size - cell) > 1e-12):
        raise ValueError(f"{path}: cached map {rows}x{cols}@{cell} does not match grid {cfg.shape}@{cfg.cell_size}")
    return NormalizationMap(grid, digest, cfg)


def cached_normalization_map(spec: SensorSpec, cfg: BevConfig, cache_dir) -> NormalizationMap:
    """Load the map for (spec, cfg) from ``cache_dir`` or build and store it."""
    digest = sensor_hash(spec, cfg)
    path = Path(cache_dir) / f"normmap_{digest[:16]}.bin"
    if path.exists():
        nmap = load_normalization_map(path, cfg)
        if nmap.sensor_hash == digest:
            return nmap
    nmap = compute_normalization_map(spec, cfg)
    Path(cache_dir).mkdir(parents=True, exist_ok=True)
    save_normalization_map(nmap, path)
    return nmap
