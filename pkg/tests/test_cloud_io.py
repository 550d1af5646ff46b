import math

import numpy as np
import pytest

from bevkit.cloud_io import (
    Calibration,
    Difficulty,
    GtObject,
    MalformedInputError,
    ObjectClass,
    PointCloud,
    SensorSpec,
    builtin_sensor,
    camera_box_corners,
    camera_to_sensor_yaw,
    difficulty_of,
    format_kitti_calib,
    format_label_line,
    parse_label_line,
    read_kitti_bin,
    read_kitti_calib,
    read_kitti_labels,
    read_sensor_spec,
    resolve_sensor,
    sensor_spec_from_dict,
    sensor_to_camera_yaw,
    write_kitti_bin,
)
from bevkit.geom import Box3D


def test_bin_two_points(tmp_path):
    raw = np.array([1, 2, 3, 0.5, 4, 5, 6, 0.25], dtype="<f4").tobytes()
    assert len(raw) == 32
    p = tmp_path / "000001.bin"
    p.write_bytes(raw)
    cloud = read_kitti_bin(p)
    assert len(cloud) == 2
    assert cloud.frame_id == "000001"
    np.testing.assert_array_equal(cloud.points, [[1, 2, 3, 0.5], [4, 5, 6, 0.25]])


def test_bin_empty(tmp_path):
    p = tmp_path / "e.bin"
    p.write_bytes(b"")
    assert len(read_kitti_bin(p)) == 0


def test_bin_misaligned(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"\0" * 33)
    with pytest.raises(MalformedInputError):
        read_kitti_bin(p)


def test_bin_non_finite(tmp_path):
    p = tmp_path / "nan.bin"
    p.write_bytes(np.array([np.nan, 0, 0, 0], dtype="<f4").tobytes())
    with pytest.raises(MalformedInputError):
        read_kitti_bin(p)


def test_bin_byte_intensity_rescaled(tmp_path):
    p = tmp_path / "b.bin"
    p.write_bytes(np.array([1, 2, 3, 255, 1, 2, 3, 51], dtype="<f4").tobytes())
    np.testing.assert_allclose(read_kitti_bin(p).intensity, [1.0, 0.2], rtol=1e-6)


def test_bin_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    cloud = PointCloud(np.column_stack([rng.normal(size=(50, 3)) * 10, rng.uniform(0, 1, 50)]))
    p = tmp_path / "rt.bin"
    write_kitti_bin(cloud, p)
    np.testing.assert_array_equal(read_kitti_bin(p).points, cloud.points)
    assert not list(tmp_path.glob(".*tmp"))


def test_pointcloud_is_read_only():
    cloud = PointCloud(np.zeros((3, 4)))
    with pytest.raises(ValueError):
        cloud.points[0, 0] = 1.0


LABEL = "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.48 1.60 3.69 -2.70 1.74 4.54 -1.84"


def test_label_field_mapping():
    obj = parse_label_line(LABEL, Calibration.default())
    assert obj.cls == ObjectClass.CAR
    b = obj.box3d
    assert (b.l, b.w, b.h) == (3.69, 1.60, 1.48)
    # camera (x, y, z) = (-2.70, 1.74, 4.54) is the bottom center; sensor x = cam z, y = -cam x, z = -cam y
    assert b.x == pytest.approx(4.54)
    assert b.y == pytest.approx(2.70)
    assert b.z == pytest.approx(-1.74 + 0.74)
    assert b.yaw == pytest.approx(1.84 - math.pi / 2)
    assert obj.image_bbox_height == pytest.approx(200.12 - 173.33)
    assert obj.difficulty == Difficulty.MODERATE


def test_label_empty_file(tmp_path):
    p = tmp_path / "l.txt"
    p.write_text("")
    assert read_kitti_labels(p, Calibration.default()) == []


def test_label_type_mapping():
    calib = Calibration.default()
    assert parse_label_line(LABEL.replace("Car", "Van", 1), calib).cls == ObjectClass.DONTCARE
    dc = parse_label_line("DontCare -1 -1 -10 503 169 590 190 -1 -1 -1 -1000 -1000 -1000 -10", calib)
    assert dc.cls == ObjectClass.DONTCARE and dc.box3d is None
    with pytest.raises(MalformedInputError):
        parse_label_line(LABEL.replace("Car", "Spaceship", 1), calib)
    with pytest.raises(MalformedInputError):
        parse_label_line("Car 0 0", calib)


def test_label_round_trip_through_camera_frame():
    calib = Calibration.default()
    obj = GtObject(ObjectClass.PEDESTRIAN, Box3D(8.0, -2.0, -0.9, 0.7, 0.6, 1.7, 0.4), occlusion=1)
    back = parse_label_line(format_label_line(obj, calib), calib)
    for f in ("x", "y", "z", "l", "w", "h", "yaw"):
        assert getattr(back.box3d, f) == pytest.approx(getattr(obj.box3d, f), abs=1e-8)
    assert back.occlusion == 1


@pytest.mark.parametrize("ry", [-3.0, -1.2, 0.0, 0.5, 2.9])
def test_yaw_conversion_inverse(ry):
    assert math.remainder(sensor_to_camera_yaw(camera_to_sensor_yaw(ry)) - ry, 2 * math.pi) == pytest.approx(0, abs=1e-12)


def test_yaw_conversion_matches_corners():
    # the long side of the camera-frame box, mapped to the sensor frame, points along the sensor yaw
    calib = Calibration.default()
    ry = 0.7
    corners = camera_box_corners((1.5, 1.6, 4.0), (0.0, 0.0, 10.0), ry)
    velo = calib.rect_to_velo(corners)
    front = velo[[0, 1]].mean(axis=0) - velo[[2, 3]].mean(axis=0)
    assert math.atan2(front[1], front[0]) == pytest.approx(camera_to_sensor_yaw(ry))


def test_calib_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    calib = Calibration(np.column_stack([q, [0.1, -0.2, 0.3]]), np.eye(3))
    p = tmp_path / "calib.txt"
    p.write_text("P0: 1 0 0 0 0 1 0 0 0 0 1 0\n" + format_kitti_calib(calib))
    back = read_kitti_calib(p)
    np.testing.assert_allclose(back.velo_to_cam, calib.velo_to_cam, atol=1e-11)
    pts = rng.normal(size=(10, 3))
    np.testing.assert_allclose(back.rect_to_velo(back.velo_to_rect(pts)), pts, atol=1e-9)


def test_calib_missing_entry(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("R0_rect: 1 0 0 0 1 0 0 0 1\n")
    with pytest.raises(MalformedInputError):
        read_kitti_calib(p)


def test_calib_rejects_non_rotation():
    with pytest.raises(ValueError):
        Calibration(np.hstack([2 * np.eye(3), np.zeros((3, 1))]))


def test_vlp16_builtin():
    spec = builtin_sensor("vlp16")
    assert spec.n_planes == 16
    np.testing.assert_allclose(np.degrees(spec.plane_angles), np.arange(-15, 16, 2))
    assert math.degrees(spec.delta_theta) == pytest.approx(0.2)
    assert spec.n_azimuths == 1800


def test_builtin_plane_counts():
    assert builtin_sensor("hdl32e").n_planes == 32
    assert builtin_sensor("hdl64e").n_planes == 64
    with pytest.raises(ValueError):
        builtin_sensor("nope")


def test_two_plane_spec_valid():
    spec = SensorSpec((-0.1, 0.1), 0.003, 1.7)
    assert spec.n_planes == 2


def test_duplicate_angles_rejected(tmp_path):
    p = tmp_path / "dup.yaml"
    p.write_text("plane_angles_deg: [-1, 0, 0, 1]\ndelta_theta_deg: 0.2\nmount_height_m: 1.7\n")
    with pytest.raises(ValueError):
        read_sensor_spec(p)


def test_spec_field_checks():
    with pytest.raises(ValueError):
        sensor_spec_from_dict({"plane_angles_deg": [0.0]})
    with pytest.raises(ValueError):
        SensorSpec((math.pi / 2,), 0.01, 1.7)
    with pytest.raises(ValueError):
        SensorSpec((0.0,), 0.0, 1.7)
    with pytest.raises(ValueError):
        SensorSpec((), 0.01, 1.7)


def test_resolve_sensor_path_or_name(tmp_path):
    p = tmp_path / "mine.yaml"
    p.write_text("plane_angles_deg: [-2, 2]\ndelta_theta_deg: 1\nmount_height_m: 2\n")
    assert resolve_sensor(p).n_planes == 2
    assert resolve_sensor("hdl64e").n_planes == 64


@pytest.mark.parametrize(
    "h, occ, trunc, want",
    [
        (40, 0, 0.0, Difficulty.EASY),
        (39.9, 0, 0.0, Difficulty.MODERATE),
        (30, 1, 0.3, Difficulty.MODERATE),
        (30, 2, 0.3, Difficulty.HARD),
        (30, 0, 0.45, Difficulty.HARD),
        (24, 0, 0.0, None),
        (50, 3, 0.0, None),
    ],
)
def test_difficulty(h, occ, trunc, want):
    assert difficulty_of(h, occ, trunc) == want
