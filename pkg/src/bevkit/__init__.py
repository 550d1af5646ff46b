"""LiDAR bird's-eye-view encoding, box recovery, evaluation and ray-cast simulation."""

from ._accel import USE_NUMBA, backend_name
from .bev import AnnotatedFrame, BevConfig, BevImage, encode_bev, flip_horizontal, remove_ground, render_png, rotate90
from .cloud_io import (
    Calibration,
    GtObject,
    ObjectClass,
    PointCloud,
    SensorSpec,
    builtin_sensor,
    read_kitti_bin,
    read_kitti_calib,
    read_kitti_labels,
    read_sensor_spec,
    write_kitti_bin,
)
from .geom import Aabb2D, Box3D, OrientedBox2D, box_corners, enclosing_aabb, iou_3d, rotated_iou
from .normmap import (
    NormalizationMap,
    circle_square_intersection,
    compute_normalization_map,
    plane_cell_count,
    raycast_reference_count,
)
from .recovery import (
    ClassPriors,
    Detection2D,
    build_ground_grid,
    decode_yaw,
    encode_yaw,
    fit_oriented_box,
    length_candidates,
    lift_to_3d,
    yaw_bin_centers,
)
from .sim import Scene, SceneObject, oracle_detections, simulate_scan

__version__ = "0.1.0"
