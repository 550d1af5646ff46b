import json
import logging

import numpy as np
import pytest
from PIL import Image

from bevkit.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from bevkit.cloud_io import Calibration, read_kitti_labels

GRID = ["--cell-size", "0.5", "--forward-range", "40", "--lateral-range", "20"]


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    sim = root / "sim"
    for fid, seed in (("000000", "1"), ("000001", "2")):
        rc = main(["simulate", "--random", "3", "--sensor", "vlp16", "--seed", seed, "--frame-id", fid,
                   "--output-dir", str(sim), "--detections", str(root / f"dets_{fid}.jsonl")])
        assert rc == EXIT_OK
    dets = root / "dets.jsonl"
    dets.write_text("".join((root / f"dets_{f}.jsonl").read_text() for f in ("000000", "000001")))
    nmap = root / "nm.bin"
    assert main(["normmap", "--sensor", "vlp16", "--normmap", str(nmap), *GRID]) == EXIT_OK
    return root, sim, nmap, dets


def _gt_boxes_jsonl(sim, path, frame_ids=("000000", "000001"), rename=None):
    lines = []
    for fid in frame_ids:
        for obj in read_kitti_labels(sim / "label_2" / f"{fid}.txt", Calibration.default()):
            b = obj.box3d
            lines.append(json.dumps({
                "frame_id": rename or fid, "class": obj.cls.value, "score": 1.0,
                "box3d": {"x": b.x, "y": b.y, "z": b.z, "l": b.l, "w": b.w, "h": b.h, "yaw": b.yaw},
            }))
    path.write_text("".join(ln + "\n" for ln in lines))
    return path


def test_simulate_outputs(work):
    _, sim, _, _ = work
    assert (sim / "velodyne" / "000000.bin").stat().st_size % 16 == 0
    assert len(read_kitti_labels(sim / "label_2" / "000000.txt", Calibration.default())) == 3
    assert (sim / "calib" / "000000.txt").exists()


def test_encode_directory(work, tmp_path):
    _, sim, nmap, _ = work
    out = tmp_path / "bev"
    assert main(["encode", "--cloud-dir", str(sim / "velodyne"), "--normmap", str(nmap), "--output-dir", str(out),
                 "--jobs", "2", *GRID]) == EXIT_OK
    pngs = sorted(out.glob("*.png"))
    assert [p.name for p in pngs] == ["000000.png", "000001.png"]
    img = np.asarray(Image.open(pngs[0]))
    assert img.shape == (80, 80, 3) and img.any()
    first = pngs[0].read_bytes()
    assert main(["encode", "--cloud-dir", str(sim / "velodyne"), "--normmap", str(nmap), "--output-dir", str(out),
                 *GRID]) == EXIT_OK
    assert pngs[0].read_bytes() == first


def test_encode_empty_directory(work, tmp_path, capsys):
    _, _, nmap, _ = work
    (tmp_path / "empty").mkdir()
    rc = main(["encode", "--cloud-dir", str(tmp_path / "empty"), "--normmap", str(nmap),
               "--output-dir", str(tmp_path / "o"), *GRID])
    assert rc == EXIT_OK
    assert list((tmp_path / "o").iterdir()) == []
    assert "encoded 0 frame(s)" in capsys.readouterr().out


def test_missing_normmap_is_instructive(work, tmp_path, capsys):
    _, sim, _, _ = work
    rc = main(["encode", "--cloud-dir", str(sim / "velodyne"), "--normmap", str(tmp_path / "none.bin"), *GRID])
    assert rc == EXIT_DATA
    assert "bevkit normmap" in capsys.readouterr().err


def test_normmap_grid_mismatch(work, tmp_path, capsys):
    _, sim, nmap, _ = work
    rc = main(["encode", "--cloud-dir", str(sim / "velodyne"), "--normmap", str(nmap), "--output-dir", str(tmp_path),
               "--cell-size", "0.25", "--forward-range", "40", "--lateral-range", "20"])
    assert rc == EXIT_DATA
    assert "rebuild" in capsys.readouterr().err


def test_render_channels(work, tmp_path):
    _, sim, nmap, _ = work
    out = tmp_path / "d.png"
    rc = main(["render", str(sim / "velodyne" / "000000.bin"), "--out", str(out), "--normmap", str(nmap),
               "--channels", "density", *GRID])
    assert rc == EXIT_OK
    img = np.asarray(Image.open(out))
    assert img[..., 1].any() and not img[..., 0].any() and not img[..., 2].any()


def test_recover_and_skip_malformed(work, tmp_path, caplog):
    root, sim, nmap, dets = work
    n = len(dets.read_text().splitlines())
    bad = tmp_path / "bad.jsonl"
    bad.write_text(dets.read_text() + "{not json\n")
    out = tmp_path / "boxes.jsonl"
    with caplog.at_level(logging.WARNING, logger="bevkit"):
        rc = main(["recover", str(bad), "--out", str(out), "--cloud-dir", str(sim / "velodyne"),
                   "--normmap", str(nmap), *GRID])
    assert rc == EXIT_OK
    recs = [json.loads(ln) for ln in out.read_text().splitlines()]
    assert len(recs) == n
    assert any(f"line {n + 1} skipped" in r.message for r in caplog.records)
    assert {"x", "y", "z", "l", "w", "h", "yaw"} <= set(recs[0]["box3d"])


def test_recover_empty_file(work, tmp_path):
    _, sim, nmap, _ = work
    (tmp_path / "e.jsonl").write_text("")
    out = tmp_path / "o.jsonl"
    rc = main(["recover", str(tmp_path / "e.jsonl"), "--out", str(out), "--cloud-dir", str(sim / "velodyne"),
               "--normmap", str(nmap), *GRID])
    assert rc == EXIT_OK and out.read_text() == ""


def test_eval_gt_as_detections(work, tmp_path):
    _, sim, _, _ = work
    boxes = _gt_boxes_jsonl(sim, tmp_path / "gt.jsonl")
    out = tmp_path / "ev"
    assert main(["eval", str(boxes), "--label-dir", str(sim / "label_2"), "--calib-dir", str(sim / "calib"),
                 "--output-dir", str(out)]) == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    aps = [r["ap"] for r in report["results"] if r["ap"] is not None]
    assert aps and all(ap == 1.0 for ap in aps)
    assert (out / "report.txt").read_text().strip()


def test_eval_empty_detections(work, tmp_path):
    _, sim, _, _ = work
    (tmp_path / "none.jsonl").write_text("")
    out = tmp_path / "ev"
    assert main(["eval", str(tmp_path / "none.jsonl"), "--label-dir", str(sim / "label_2"),
                 "--output-dir", str(out), "--car-iou", "0.5"]) == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert all(r["ap"] in (None, 0.0) for r in report["results"])
    assert all(r["iou_threshold"] == 0.5 for r in report["results"] if r["class"] == "Car")


def test_eval_lists_unmatched_frames(work, tmp_path):
    _, sim, _, _ = work
    boxes = _gt_boxes_jsonl(sim, tmp_path / "gt.jsonl", frame_ids=("000000",), rename="999999")
    out = tmp_path / "ev"
    assert main(["eval", str(boxes), "--label-dir", str(sim / "label_2"), "--output-dir", str(out)]) == EXIT_OK
    assert json.loads((out / "report.json").read_text())["skipped_frames"] == ["999999"]


def test_augment_rotation_needs_square_grid(work, tmp_path):
    _, sim, _, _ = work
    grid = ["--cell-size", "0.5", "--forward-range", "10", "--lateral-range", "10", "--fov", "full360"]
    nmap = tmp_path / "sq.bin"
    assert main(["normmap", "--sensor", "vlp16", "--normmap", str(nmap), *grid]) == EXIT_OK
    args = [str(sim / "velodyne" / "000000.bin"), "--labels", str(sim / "label_2" / "000000.txt"),
            "--normmap", str(nmap), "--output-dir", str(tmp_path / "aug")]
    assert main(["augment", *args, "--flip", "--rot", "1", *grid]) == EXIT_OK
    recs = json.loads((tmp_path / "aug" / "000000.json").read_text())
    assert len(recs) == 3
    assert main(["augment", *args, "--rot", "1", *GRID]) == EXIT_DATA


def test_config_file_and_flag_override(work, tmp_path):
    _, sim, nmap, _ = work
    cfg = tmp_path / "run.yaml"
    cfg.write_text(f"normmap: {nmap}\nbev:\n  cell_size: 0.25\n  forward_range: 40\n  lateral_range: 20\n")
    # config alone disagrees with the cached map; the flag brings it back in line
    assert main(["encode", "--config", str(cfg), "--cloud-dir", str(sim / "velodyne"),
                 "--output-dir", str(tmp_path / "o")]) == EXIT_DATA
    assert main(["encode", "--config", str(cfg), "--cloud-dir", str(sim / "velodyne"),
                 "--output-dir", str(tmp_path / "o"), "--cell-size", "0.5"]) == EXIT_OK


def test_usage_errors(capsys):
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["encode", "--normmap", "x.bin"])
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--random", "2", "--scene", "s.yaml"])
    assert exc.value.code == EXIT_USAGE


def test_selftest_quick():
    assert main(["selftest"]) == EXIT_OK
