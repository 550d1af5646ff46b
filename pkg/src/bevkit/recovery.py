"""From axis-aligned BEV detections with yaw-bin scores to oriented 3D boxes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import median_filter

from .bev import BevConfig, BevImage
from .cloud_io import ObjectClass, PointCloud
from .geom import Aabb2D, Box3D, OrientedBox2D, intersection_area, rotated_iou, wrap_angle

TWO_PI = 2.0 * math.pi
DEGENERATE_EPS = 1e-3
MAX_LENGTH = 30.0


class RecoveryError(ValueError):
    """A detection cannot be turned into a box (degenerate geometry or no height evidence)."""


@dataclass(frozen=True)
class ClassPriors:
    widths: dict = field(
        default_factory=lambda: {
            ObjectClass.CAR: 1.8,
            ObjectClass.PEDESTRIAN: 0.6,
            ObjectClass.CYCLIST: 0.6,
        }
    )

    def __post_init__(self):
        if any(not w > 0 for w in self.widths.values()):
            raise ValueError("class widths must be positive")

    def width(self, cls) -> float:
        try:
            return self.widths[ObjectClass(cls)]
        except KeyError:
            raise RecoveryError(f"no width prior for class {cls!r}") from None


@dataclass(frozen=True)
class Detection2D:
    cls: ObjectClass
    score: float
    aabb: Aabb2D
    yaw_bins: np.ndarray | None = None
    yaw: float | None = None
    frame_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "cls", ObjectClass(self.cls))
        if self.yaw_bins is None and self.yaw is None:
            raise ValueError("detection needs yaw_bins or yaw")
        if self.yaw_bins is not None:
            p = np.asarray(self.yaw_bins, dtype=np.float64)
            if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
                raise ValueError("yaw_bins must be a probability vector")
            object.__setattr__(self, "yaw_bins", p)

    def heading(self) -> float:
        if self.yaw is not None:
            return wrap_angle(float(self.yaw))
        return decode_yaw(self.yaw_bins)


# ---------------------------------------------------------------- yaw bins


def yaw_bin_centers(n_bins: int) -> np.ndarray:
    """Bin centers k*2*pi/n_bins; forward, left, rear and right are exact centers."""
    if n_bins < 4 or n_bins % 4:
        raise ValueError(f"number of yaw bins must be a positive multiple of 4, got {n_bins}")
    return np.arange(n_bins) * (TWO_PI / n_bins)


def decode_yaw(yaw_bins, n_bins: int | None = None) -> float:
    """Probability-weighted average of the best bin center and its more probable neighbor."""
    p = np.asarray(yaw_bins, dtype=np.float64)
    n = p.shape[0] if n_bins is None else n_bins
    if p.shape[0] != n:
        raise ValueError(f"expected {n} bin probabilities, got {p.shape[0]}")
    width = TWO_PI / n
    yaw_bin_centers(n)
    a = int(np.argmax(p))
    left, right = (a - 1) % n, (a + 1) % n
    if p[right] > p[left]:
        b, step = right, width
    else:
        b, step = left, -width
    total = p[a] + p[b]
    frac = p[b] / total if total > 0 else 0.0
    return wrap_angle(a * width + frac * step)


def encode_yaw(yaw: float, n_bins: int) -> np.ndarray:
    """Split unit mass between the two bin centers bracketing ``yaw``."""
    yaw_bin_centers(n_bins)
    width = TWO_PI / n_bins
    t = (yaw % TWO_PI) / width
    k = int(math.floor(t))
    frac = t - k
    k %= n_bins
    p = np.zeros(n_bins)
    p[k] += 1.0 - frac
    p[(k + 1) % n_bins] += frac
    return p


# ---------------------------------------------------------------- planar fit


def length_candidates(aabb: Aabb2D, yaw: float, w_fixed: float):
    """Lengths consistent with the x extent (l_w) and the y extent (l_h).

    Either entry is None when its divisor is within ``DEGENERATE_EPS`` of zero or
    the length falls outside [0.5 * w_fixed, 30] m.
    """
    c = math.cos(yaw)
    s = math.sin(yaw)
    l_w = l_h = None
    if abs(c) >= DEGENERATE_EPS:
        l_w = abs((aabb.h_bbox - abs(math.cos(yaw + math.pi / 2) * w_fixed)) / c)
    if abs(s) >= DEGENERATE_EPS:
        l_h = abs((aabb.w_bbox - abs(math.sin(yaw + math.pi / 2) * w_fixed)) / s)
    lo = 0.5 * w_fixed
    if l_w is not None and not (lo <= l_w <= MAX_LENGTH):
        l_w = None
    if l_h is not None and not (lo <= l_h <= MAX_LENGTH):
        l_h = None
    if l_w is None and l_h is None:
        raise RecoveryError(f"no valid length for aabb {aabb} at yaw {yaw:.6f}")
    return l_w, l_h


def fit_oriented_box(det: Detection2D, priors: ClassPriors | None = None) -> OrientedBox2D:
    """Oriented box of fixed class width whose length best explains the axis-aligned detection."""
    priors = priors or ClassPriors()
    w_fixed = priors.width(det.cls)
    yaw = det.heading()
    l_w, l_h = length_candidates(det.aabb, yaw, w_fixed)
    target = det.aabb.as_box()
    best = None
    for length in sorted(v for v in (l_w, l_h) if v is not None):
        cand = OrientedBox2D(det.aabb.cx, det.aabb.cy, length, w_fixed, yaw)
        score = rotated_iou(cand, target)
        if best is None or score > best[0] + 1e-12:
            best = (score, cand)
    return best[1]


# ---------------------------------------------------------------- ground grid


@dataclass(frozen=True, eq=False)
class GroundGrid:
    """Coarse terrain: per-cell minimum point height above ``ground_offset``, median blurred."""

    cell_size: float
    x_hi: float
    y_hi: float
    heights: np.ndarray
    valid: np.ndarray
    ground_offset: float

    def cell_rect(self, r: int, c: int):
        g = self.cell_size
        x1 = self.x_hi - r * g
        y1 = self.y_hi - c * g
        return x1 - g, x1, y1 - g, y1

    def min_under(self, box: OrientedBox2D) -> float:
        """Minimum height over every ground cell the footprint overlaps."""
        g = self.cell_size
        rows, cols = self.heights.shape
        corners_x = [box.cx + sx * 0.5 * box.l * math.cos(box.yaw) - sy * 0.5 * box.w * math.sin(box.yaw)
                     for sx in (-1, 1) for sy in (-1, 1)]
        corners_y = [box.cy + sx * 0.5 * box.l * math.sin(box.yaw) + sy * 0.5 * box.w * math.cos(box.yaw)
                     for sx in (-1, 1) for sy in (-1, 1)]
        r0 = max(0, int(math.floor((self.x_hi - max(corners_x)) / g)))
        r1 = min(rows - 1, int(math.floor((self.x_hi - min(corners_x)) / g)))
        c0 = max(0, int(math.floor((self.y_hi - max(corners_y)) / g)))
        c1 = min(cols - 1, int(math.floor((self.y_hi - min(corners_y)) / g)))
        best = math.inf
        for r in range(r0, r1 + 1):
            for c in range(c0, c1 + 1):
                x0, x1, y0, y1 = self.cell_rect(r, c)
                cell = OrientedBox2D(0.5 * (x0 + x1), 0.5 * (y0 + y1), g, g, 0.0)
                if intersection_area(cell, box) > 0.0:
                    best = min(best, float(self.heights[r, c]))
        if not math.isfinite(best):
            raise RecoveryError("footprint lies outside the ground grid")
        return best


def build_ground_grid(cloud: PointCloud, cfg: BevConfig, cell_size: float = 2.0) -> GroundGrid:
    x_lo, x_hi = cfg.x_range
    y_lo, y_hi = cfg.y_range
    rows = int(math.ceil((x_hi - x_lo) / cell_size - 1e-9))
    cols = int(math.ceil((y_hi - y_lo) / cell_size - 1e-9))
    pts = cloud.points.astype(np.float64)
    r = np.floor((x_hi - pts[:, 0]) / cell_size).astype(np.int64)
    c = np.floor((y_hi - pts[:, 1]) / cell_size).astype(np.int64)
    keep = (pts[:, 0] >= x_lo) & (pts[:, 0] <= x_hi) & (pts[:, 1] >= y_lo) & (pts[:, 1] <= y_hi)
    r = np.clip(r[keep], 0, rows - 1)
    c = np.clip(c[keep], 0, cols - 1)
    zmin = np.full(rows * cols, np.inf)
    np.minimum.at(zmin, r * cols + c, pts[keep, 2] - cfg.ground_offset)
    zmin = zmin.reshape(rows, cols)
    valid = np.isfinite(zmin)

    # Fill holes from valid 3x3 neighbours, else the nominal ground plane.
    padded = np.pad(zmin, 1, constant_values=np.inf)
    neigh = np.min(
        np.stack([padded[1 + dr : 1 + dr + rows, 1 + dc : 1 + dc + cols] for dr in (-1, 0, 1) for dc in (-1, 0, 1)]),
        axis=0,
    )
    filled = np.where(valid, zmin, np.where(np.isfinite(neigh), neigh, 0.0))
    blurred = median_filter(filled, size=3, mode="nearest")
    return GroundGrid(cell_size, x_hi, y_hi, blurred, valid, cfg.ground_offset)


# ---------------------------------------------------------------- 3D lifting


def lift_to_3d(box: OrientedBox2D, bev: BevImage, ground: GroundGrid) -> Box3D:
    """Height from the BEV height channel over the footprint, bottom from the ground grid."""
    cfg = bev.cfg
    delta = cfg.cell_size
    margin = delta / math.sqrt(2.0)
    ext = 0.5 * (box.l + box.w) + margin
    rows, cols = cfg.shape
    r_a, c_a = cfg.cell_of(box.cx + ext, box.cy + ext)
    r_b, c_b = cfg.cell_of(box.cx - ext, box.cy - ext)
    r0, r1 = max(0, int(r_a)), min(rows - 1, int(r_b))
    c0, c1 = max(0, int(c_a)), min(cols - 1, int(c_b))
    if r0 > r1 or c0 > c1:
        raise RecoveryError("footprint outside the BEV extent")
    xc, yc = cfg.cell_centers()
    xs = xc[r0 : r1 + 1, 0]
    ys = yc[0, c0 : c1 + 1]
    cs, sn = math.cos(box.yaw), math.sin(box.yaw)
    dx = xs[:, None] - box.cx
    dy = ys[None, :] - box.cy
    u = cs * dx + sn * dy
    v = -sn * dx + cs * dy
    inside = (np.abs(u) <= 0.5 * box.l + margin) & (np.abs(v) <= 0.5 * box.w + margin)
    window = bev.data[:, r0 : r1 + 1, c0 : c1 + 1]
    occupied = inside & np.any(window > 0, axis=0)
    if not occupied.any():
        raise RecoveryError("no occupied BEV cell under the footprint")
    top = float(window[0][occupied].max()) * cfg.h_top
    bottom = ground.min_under(box)
    h = top - bottom
    if not h > 0:
        raise RecoveryError(f"non-positive object height {h:.3f} m")
    z = ground.ground_offset + bottom + 0.5 * h
    return Box3D(box.cx, box.cy, z, box.l, box.w, h, box.yaw)


def recover_box(det: Detection2D, bev: BevImage, ground: GroundGrid, priors: ClassPriors | None = None) -> Box3D:
    return lift_to_3d(fit_oriented_box(det, priors), bev, ground)
