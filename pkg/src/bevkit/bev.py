"""Bird's-eye-view grid, 3-channel cell encoding, augmentation and ground removal."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np
from PIL import Image

from ._accel import USE_NUMBA, njit
from .cloud_io import GtObject, PointCloud, atomic_write_bytes
from .geom import Box3D, wrap_angle

FRONTAL_110 = "frontal110"
FULL_360 = "full360"
CHANNELS = ("height", "intensity", "density")
FRONTAL_HALF_FOV = math.radians(55.0)


def _as_cells(extent: float, cell: float) -> int:
    n = round(extent / cell)
    if abs(n * cell - extent) > 1e-9 * max(1.0, abs(extent)):
        raise ValueError(f"range {extent} m is not a whole number of {cell} m cells")
    return int(n)


@dataclass(frozen=True)
class BevConfig:
    """Grid geometry.

    Frontal mode covers x in [0, forward_range], y in [-lateral_range, lateral_range];
    full-360 mode covers x in [-forward_range, forward_range] with the same lateral span.
    Row 0 / column 0 hold the largest x / y; indices grow toward smaller coordinates.
    """

    cell_size: float = 0.05
    forward_range: float = 35.0
    lateral_range: float = 20.0
    h_top: float = 3.0
    fov_mode: str = FRONTAL_110
    ground_offset: float = -1.73

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        if not (self.forward_range > 0 and self.lateral_range > 0):
            raise ValueError("ranges must be positive")
        if not self.h_top > 0:
            raise ValueError("h_top must be positive")
        if self.fov_mode not in (FRONTAL_110, FULL_360):
            raise ValueError(f"fov_mode must be {FRONTAL_110!r} or {FULL_360!r}")
        _as_cells(self.forward_range, self.cell_size)
        _as_cells(self.lateral_range, self.cell_size)

    @property
    def x_hi_cells(self) -> int:
        return _as_cells(self.forward_range, self.cell_size)

    @property
    def x_lo_cells(self) -> int:
        return 0 if self.fov_mode == FRONTAL_110 else -self.x_hi_cells

    @property
    def y_hi_cells(self) -> int:
        return _as_cells(self.lateral_range, self.cell_size)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.x_hi_cells - self.x_lo_cells, 2 * self.y_hi_cells)

    @property
    def x_range(self) -> tuple[float, float]:
        return (self.x_lo_cells * self.cell_size, self.x_hi_cells * self.cell_size)

    @property
    def y_range(self) -> tuple[float, float]:
        return (-self.y_hi_cells * self.cell_size, self.y_hi_cells * self.cell_size)

    def row_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-row (x_lo, x_hi). Computed as integer multiples of the cell size."""
        r = np.arange(self.shape[0])
        k = self.x_hi_cells - r
        return (k - 1) * self.cell_size, k * self.cell_size

    def col_edges(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.arange(self.shape[1])
        k = self.y_hi_cells - c
        return (k - 1) * self.cell_size, k * self.cell_size

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Broadcastable (rows, 1) x-centers and (1, cols) y-centers."""
        x0, x1 = self.row_edges()
        y0, y1 = self.col_edges()
        return (0.5 * (x0 + x1))[:, None], (0.5 * (y0 + y1))[None, :]

    def cell_of(self, x, y):
        """Row/col indices of planar coordinates (may fall outside the grid)."""
        r = self.x_hi_cells - 1 - cell_floor(np.asarray(x, dtype=np.float64), self.cell_size)
        c = self.y_hi_cells - 1 - cell_floor(np.asarray(y, dtype=np.float64), self.cell_size)
        return r, c

    def fingerprint(self) -> dict:
        return {
            "cell_size": self.cell_size,
            "forward_range": self.forward_range,
            "lateral_range": self.lateral_range,
            "h_top": self.h_top,
            "fov_mode": self.fov_mode,
        }

    @cached_property
    def fov_mask(self) -> np.ndarray:
        """Cells kept after encoding; frontal mode keeps the 110 degree wedge."""
        if self.fov_mode == FULL_360:
            return np.ones(self.shape, dtype=bool)
        xc, yc = self.cell_centers()
        return np.abs(np.arctan2(yc, xc)) <= FRONTAL_HALF_FOV + 1e-12

    @classmethod
    def full360(cls, half_size: float = 20.0, **kw) -> "BevConfig":
        return cls(forward_range=half_size, lateral_range=half_size, fov_mode=FULL_360, **kw)


@dataclass(frozen=True, eq=False)
class BevImage:
    """``data`` has shape (3, rows, cols): height, intensity, density, all in [0, 1]."""

    data: np.ndarray
    cfg: BevConfig

    @property
    def height(self) -> np.ndarray:
        return self.data[0]

    @property
    def intensity(self) -> np.ndarray:
        return self.data[1]

    @property
    def density(self) -> np.ndarray:
        return self.data[2]

    def channel(self, name: str) -> np.ndarray:
        return self.data[CHANNELS.index(name)]

    def occupied(self) -> np.ndarray:
        return np.any(self.data > 0, axis=0)

    def __eq__(self, other):
        return isinstance(other, BevImage) and self.cfg == other.cfg and np.array_equal(self.data, other.data)


@dataclass(frozen=True)
class AnnotatedFrame:
    bev: BevImage
    objects: tuple[GtObject, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))


# ---------------------------------------------------------------- encoding kernels


# Cell index along one axis. Binning |v| and choosing the side from the sign bit
# makes v and -v land in mirror cells even on exact edges (and for -0.0), which
# is what lets quarter-turn rotation commute with encoding bit for bit.


@njit
def _cell_floor_scalar(v, cell):
    q = int(math.floor(abs(v) / cell))
    return -q - 1 if math.copysign(1.0, v) < 0.0 else q


def cell_floor(v, cell):
    q = np.floor(np.abs(v) / cell).astype(np.int64)
    return np.where(np.signbit(v), -q - 1, q)


@njit
def _accumulate_numba(x, y, z, inten, x_hi_cells, y_hi_cells, rows, cols, cell, h_top):
    # z is already relative to the ground plane
    hmax = np.zeros((rows, cols), dtype=np.float64)
    isum = np.zeros((rows, cols), dtype=np.float64)
    count = np.zeros((rows, cols), dtype=np.int64)
    for i in range(x.shape[0]):
        zi = z[i]
        if not (zi >= 0.0 and zi <= h_top):
            continue
        r = x_hi_cells - 1 - _cell_floor_scalar(x[i], cell)
        c = y_hi_cells - 1 - _cell_floor_scalar(y[i], cell)
        if r < 0 or r >= rows or c < 0 or c >= cols:
            continue
        if zi > hmax[r, c]:
            hmax[r, c] = zi
        isum[r, c] += inten[i]
        count[r, c] += 1
    return hmax, isum, count


def _accumulate_numpy(x, y, z, inten, x_hi_cells, y_hi_cells, rows, cols, cell, h_top):
    keep = (z >= 0.0) & (z <= h_top)
    r = x_hi_cells - 1 - cell_floor(x, cell)
    c = y_hi_cells - 1 - cell_floor(y, cell)
    keep &= (r >= 0) & (r < rows) & (c >= 0) & (c < cols)
    flat = r[keep] * cols + c[keep]
    n = rows * cols
    count = np.bincount(flat, minlength=n).reshape(rows, cols)
    # bincount sums sequentially in input order, matching the loop kernel bit for bit
    isum = np.bincount(flat, weights=inten[keep], minlength=n).reshape(rows, cols).astype(np.float64, copy=False)
    hmax = np.zeros(n, dtype=np.float64)
    np.maximum.at(hmax, flat, z[keep])
    return hmax.reshape(rows, cols), isum, count


def accumulate_cells(cloud: PointCloud, cfg: BevConfig, use_numba: bool | None = None):
    """Per-cell (max height above ground, intensity sum, point count)."""
    pts = cloud.points.astype(np.float64)
    x, y = np.ascontiguousarray(pts[:, 0]), np.ascontiguousarray(pts[:, 1])
    z = np.ascontiguousarray(pts[:, 2] - cfg.ground_offset)
    inten = np.ascontiguousarray(pts[:, 3])
    rows, cols = cfg.shape
    args = (x, y, z, inten, cfg.x_hi_cells, cfg.y_hi_cells, rows, cols, cfg.cell_size, cfg.h_top)
    if use_numba is None:
        use_numba = USE_NUMBA
    kernel = _accumulate_numba if use_numba else _accumulate_numpy
    return kernel(*args)


def encode_bev(cloud: PointCloud, cfg: BevConfig, nmap, use_numba: bool | None = None) -> BevImage:
    """Rasterize ``cloud`` into height / mean intensity / normalized density channels."""
    counts_max = nmap.grid
    if counts_max.shape != cfg.shape:
        raise ValueError(f"normalization map shape {counts_max.shape} does not match grid {cfg.shape}")
    if getattr(nmap, "cfg", None) is not None and nmap.cfg.fingerprint() != cfg.fingerprint():
        raise ValueError("normalization map was built for a different grid configuration")
    hmax, isum, count = accumulate_cells(cloud, cfg, use_numba)
    data = np.zeros((3,) + cfg.shape, dtype=np.float32)
    hit = count > 0
    data[0] = np.minimum(hmax / cfg.h_top, 1.0)
    np.divide(isum, count, out=isum, where=hit)
    data[1] = np.where(hit, np.clip(isum, 0.0, 1.0), 0.0)
    mm = counts_max.astype(np.float64)
    dens = np.zeros(cfg.shape)
    np.divide(count, mm, out=dens, where=mm > 0)
    data[2] = np.minimum(dens, 1.0)
    if cfg.fov_mode == FRONTAL_110:
        data[:, ~cfg.fov_mask] = 0.0
    return BevImage(data, cfg)


def isolate_channels(bev: BevImage, keep) -> BevImage:
    """Zero every channel not named in ``keep``."""
    keep = set(keep)
    unknown = keep - set(CHANNELS)
    if unknown:
        raise ValueError(f"unknown channel(s): {sorted(unknown)}")
    data = bev.data.copy()
    for i, name in enumerate(CHANNELS):
        if name not in keep:
            data[i] = 0.0
    return BevImage(data, bev.cfg)


# ---------------------------------------------------------------- ground removal


def remove_ground(cloud: PointCloud, grid_size: float, height_diff_threshold: float) -> PointCloud:
    """Drop every point in grid cells whose height spread is below the threshold."""
    if not (grid_size > 0 and height_diff_threshold > 0):
        raise ValueError("grid_size and height_diff_threshold must be positive")
    if len(cloud) == 0:
        return cloud
    pts = cloud.points
    ij = np.floor(pts[:, :2].astype(np.float64) / grid_size).astype(np.int64)
    _, inv = np.unique(ij, axis=0, return_inverse=True)
    inv = inv.ravel()
    n = inv.max() + 1
    z = pts[:, 2].astype(np.float64)
    zmax = np.full(n, -np.inf)
    zmin = np.full(n, np.inf)
    np.maximum.at(zmax, inv, z)
    np.minimum.at(zmin, inv, z)
    keep_cell = (zmax - zmin) >= height_diff_threshold
    return PointCloud(pts[keep_cell[inv]], cloud.frame_id)


# ---------------------------------------------------------------- augmentation


def _retarget(obj: GtObject, box: Box3D) -> GtObject:
    return replace(obj, box3d=box)


def flip_horizontal(frame: AnnotatedFrame) -> AnnotatedFrame:
    """Mirror across the forward axis (y -> -y)."""
    data = np.ascontiguousarray(frame.bev.data[:, :, ::-1])
    objects = []
    for obj in frame.objects:
        b = obj.box3d
        if b is None:
            objects.append(obj)
            continue
        objects.append(_retarget(obj, replace(b, y=-b.y, yaw=wrap_angle(-b.yaw))))
    return AnnotatedFrame(BevImage(data, frame.bev.cfg), objects)


def rotate90(frame: AnnotatedFrame, k: int) -> AnnotatedFrame:
    """Rotate by ``k`` counter-clockwise quarter turns about the sensor, without resampling."""
    cfg = frame.bev.cfg
    if cfg.fov_mode != FULL_360 or cfg.x_hi_cells != cfg.y_hi_cells:
        raise ValueError("rotate90 needs a square full-360 grid centered on the sensor")
    k = int(k) % 4
    if k == 0:
        return frame
    data = np.ascontiguousarray(np.rot90(frame.bev.data, k, axes=(1, 2)))
    objects = []
    for obj in frame.objects:
        b = obj.box3d
        if b is None:
            objects.append(obj)
            continue
        x, y = rotate_xy90(b.x, b.y, k)
        objects.append(_retarget(obj, replace(b, x=x, y=y, yaw=wrap_angle(b.yaw + k * (math.pi / 2)))))
    return AnnotatedFrame(BevImage(data, cfg), objects)


def rotate_xy90(x, y, k: int):
    """Exact quarter-turn rotation of coordinates (sign flips and swaps only)."""
    k = int(k) % 4
    if k == 0:
        return x, y
    if k == 1:
        return -y, x
    if k == 2:
        return -x, -y
    return y, -x


def rotate_cloud90(cloud: PointCloud, k: int) -> PointCloud:
    pts = cloud.points.copy()
    pts[:, 0], pts[:, 1] = rotate_xy90(cloud.points[:, 0].copy(), cloud.points[:, 1].copy(), k)
    return PointCloud(pts, cloud.frame_id)


# ---------------------------------------------------------------- PNG


def render_png(bev: BevImage, path) -> None:
    """8-bit RGB PNG with R = intensity, G = density, B = height."""
    rgb = np.stack([bev.intensity, bev.density, bev.height], axis=-1)
    pix = np.round(255.0 * np.clip(rgb.astype(np.float64), 0.0, 1.0)).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(pix, mode="RGB").save(buf, format="PNG")
    atomic_write_bytes(Path(path), buf.getvalue())


def read_png(path) -> np.ndarray:
    """(3, rows, cols) uint8 array in channel order height, intensity, density."""
    with Image.open(path) as im:
        pix = np.asarray(im.convert("RGB"))
    return np.stack([pix[..., 2], pix[..., 0], pix[..., 1]])
