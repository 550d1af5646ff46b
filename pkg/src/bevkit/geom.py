"""Oriented box geometry in the sensor frame (meters, yaw about +z)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._accel import njit

TWO_PI = 2.0 * math.pi
_MIN_AREA = 1e-12


def wrap_angle(theta: float) -> float:
    """Wrap to (-pi, pi]. Values already in range are returned unchanged."""
    r = math.remainder(theta, TWO_PI)
    if r <= -math.pi:
        r = math.pi
    return r


@dataclass(frozen=True)
class OrientedBox2D:
    cx: float
    cy: float
    l: float
    w: float
    yaw: float

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0):
            raise ValueError(f"box sizes must be positive, got l={self.l}, w={self.w}")

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.l, self.w, self.yaw], dtype=np.float64)

    @property
    def area(self) -> float:
        return self.l * self.w


@dataclass(frozen=True)
class Aabb2D:
    """Axis-aligned rectangle; ``h_bbox`` spans x, ``w_bbox`` spans y."""

    cx: float
    cy: float
    h_bbox: float
    w_bbox: float

    def __post_init__(self):
        if not (self.h_bbox > 0 and self.w_bbox > 0):
            raise ValueError(f"aabb extents must be positive, got {self.h_bbox}, {self.w_bbox}")

    def as_box(self) -> OrientedBox2D:
        return OrientedBox2D(self.cx, self.cy, self.h_bbox, self.w_bbox, 0.0)


@dataclass(frozen=True)
class Box3D:
    """Upright 3D box. ``(x, y, z)`` is the geometric center."""

    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    yaw: float

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError(f"box sizes must be positive, got {(self.l, self.w, self.h)}")

    @property
    def center(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.z)

    @property
    def size(self) -> tuple[float, float, float]:
        return (self.l, self.w, self.h)

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    def footprint(self) -> OrientedBox2D:
        return OrientedBox2D(self.x, self.y, self.l, self.w, self.yaw)

    def corners(self) -> np.ndarray:
        """(8, 3) corners: bottom face CCW, then top face CCW."""
        xy = box_corners(self.footprint())
        z0 = self.z - 0.5 * self.h
        z1 = self.z + 0.5 * self.h
        bottom = np.column_stack([xy, np.full(4, z0)])
        top = np.column_stack([xy, np.full(4, z1)])
        return np.vstack([bottom, top])


def box_corners(box: OrientedBox2D) -> np.ndarray:
    """Counter-clockwise (4, 2) corners of the rotated rectangle."""
    return _corners(box.cx, box.cy, box.l, box.w, box.yaw)


@njit
def _corners(cx, cy, l, w, yaw):
    c = math.cos(yaw)
    s = math.sin(yaw)
    hl = 0.5 * l
    hw = 0.5 * w
    out = np.empty((4, 2))
    lx = (hl, -hl, -hl, hl)
    ly = (hw, hw, -hw, -hw)
    for i in range(4):
        out[i, 0] = cx + c * lx[i] - s * ly[i]
        out[i, 1] = cy + s * lx[i] + c * ly[i]
    return out


def enclosing_aabb(box: OrientedBox2D) -> Aabb2D:
    c = abs(math.cos(box.yaw))
    s = abs(math.sin(box.yaw))
    return Aabb2D(box.cx, box.cy, box.l * c + box.w * s, box.l * s + box.w * c)


@njit
def _clip_area(pa, pb):
    # Sutherland-Hodgman: clip convex CCW polygon pa by convex CCW polygon pb.
    src = np.empty((16, 2))
    dst = np.empty((16, 2))
    n = pa.shape[0]
    for i in range(n):
        src[i, 0] = pa[i, 0]
        src[i, 1] = pa[i, 1]
    m_clip = pb.shape[0]
    for e in range(m_clip):
        ax = pb[e, 0]
        ay = pb[e, 1]
        bx = pb[(e + 1) % m_clip, 0]
        by = pb[(e + 1) % m_clip, 1]
        ex = bx - ax
        ey = by - ay
        m = 0
        for i in range(n):
            px = src[i, 0]
            py = src[i, 1]
            qx = src[(i + 1) % n, 0]
            qy = src[(i + 1) % n, 1]
            sp = ex * (py - ay) - ey * (px - ax)
            sq = ex * (qy - ay) - ey * (qx - ax)
            if sp >= 0.0:
                dst[m, 0] = px
                dst[m, 1] = py
                m += 1
                if sq < 0.0:
                    t = sp / (sp - sq)
                    dst[m, 0] = px + t * (qx - px)
                    dst[m, 1] = py + t * (qy - py)
                    m += 1
            elif sq >= 0.0:
                t = sp / (sp - sq)
                dst[m, 0] = px + t * (qx - px)
                dst[m, 1] = py + t * (qy - py)
                m += 1
        n = m
        if n < 3:
            return 0.0
        for i in range(n):
            src[i, 0] = dst[i, 0]
            src[i, 1] = dst[i, 1]
    area = 0.0
    for i in range(n):
        j = (i + 1) % n
        area += src[i, 0] * src[j, 1] - src[j, 0] * src[i, 1]
    area = 0.5 * abs(area)
    if area < _MIN_AREA:
        return 0.0
    return area


@njit
def _iou_xy(a, b):
    # a, b: (cx, cy, l, w, yaw); ordered so the result is symmetric bit for bit
    swap = False
    for k in range(5):
        if a[k] != b[k]:
            swap = a[k] > b[k]
            break
    if swap:
        a, b = b, a
    ca = _corners(a[0], a[1], a[2], a[3], a[4])
    cb = _corners(b[0], b[1], b[2], b[3], b[4])
    inter = _clip_area(ca, cb)
    if inter <= 0.0:
        return 0.0, 0.0
    # rounding in the clipper can overshoot the smaller box, which would push IoU past 1
    area_a = a[2] * a[3]
    area_b = b[2] * b[3]
    inter = min(inter, area_a, area_b)
    union = area_a + area_b - inter
    return inter / union, inter


@njit
def _iou_matrix(boxes_a, boxes_b):
    out = np.zeros((boxes_a.shape[0], boxes_b.shape[0]))
    for i in range(boxes_a.shape[0]):
        for j in range(boxes_b.shape[0]):
            out[i, j] = _iou_xy(boxes_a[i], boxes_b[j])[0]
    return out


@njit
def _iou3d_matrix(boxes_a, boxes_b):
    # rows: (x, y, z, l, w, h, yaw)
    out = np.zeros((boxes_a.shape[0], boxes_b.shape[0]))
    fa = np.empty(5)
    fb = np.empty(5)
    for i in range(boxes_a.shape[0]):
        a = boxes_a[i]
        fa[0] = a[0]
        fa[1] = a[1]
        fa[2] = a[3]
        fa[3] = a[4]
        fa[4] = a[6]
        for j in range(boxes_b.shape[0]):
            b = boxes_b[j]
            fb[0] = b[0]
            fb[1] = b[1]
            fb[2] = b[3]
            fb[3] = b[4]
            fb[4] = b[6]
            lo = max(a[2] - 0.5 * a[5], b[2] - 0.5 * b[5])
            hi = min(a[2] + 0.5 * a[5], b[2] + 0.5 * b[5])
            if hi <= lo:
                continue
            inter2 = _iou_xy(fa, fb)[1]
            inter = inter2 * (hi - lo)
            if inter <= 0.0:
                continue
            va = a[3] * a[4] * a[5]
            vb = b[3] * b[4] * b[5]
            out[i, j] = inter / (va + vb - inter)
    return out


def rotated_iou(a: OrientedBox2D, b: OrientedBox2D) -> float:
    """Planar IoU of two oriented rectangles by convex polygon clipping."""
    return float(_iou_xy(a.as_array(), b.as_array())[0])


def intersection_area(a: OrientedBox2D, b: OrientedBox2D) -> float:
    return float(_iou_xy(a.as_array(), b.as_array())[1])


def iou_3d(a: Box3D, b: Box3D) -> float:
    return float(_iou3d_matrix(boxes3d_to_array([a]), boxes3d_to_array([b]))[0, 0])


def boxes2d_to_array(boxes) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 5))
    return np.array([[b.cx, b.cy, b.l, b.w, b.yaw] for b in boxes], dtype=np.float64)


def boxes3d_to_array(boxes) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 7))
    return np.array([[b.x, b.y, b.z, b.l, b.w, b.h, b.yaw] for b in boxes], dtype=np.float64)


def iou_matrix_bev(boxes_a, boxes_b) -> np.ndarray:
    """Pairwise footprint IoU for two sequences of Box3D."""
    fa = boxes3d_to_array(boxes_a)[:, [0, 1, 3, 4, 6]]
    fb = boxes3d_to_array(boxes_b)[:, [0, 1, 3, 4, 6]]
    return _iou_matrix(np.ascontiguousarray(fa), np.ascontiguousarray(fb))


def iou_matrix_3d(boxes_a, boxes_b) -> np.ndarray:
    return _iou3d_matrix(boxes3d_to_array(boxes_a), boxes3d_to_array(boxes_b))


def points_in_box(xy: np.ndarray, box: OrientedBox2D, margin: float = 0.0) -> np.ndarray:
    """Mask of planar points inside ``box`` grown by ``margin`` on every side."""
    c = math.cos(box.yaw)
    s = math.sin(box.yaw)
    dx = xy[..., 0] - box.cx
    dy = xy[..., 1] - box.cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (np.abs(u) <= 0.5 * box.l + margin) & (np.abs(v) <= 0.5 * box.w + margin)
