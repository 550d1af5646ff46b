import json
import math

import numpy as np
import pytest

from bevkit.cloud_io import Difficulty, GtObject, ObjectClass
from bevkit.evaluation import (
    CAR_05_THRESHOLDS,
    FP,
    IGNORED,
    TP,
    Criterion,
    ScoredBox,
    average_orientation_similarity,
    average_precision,
    evaluate,
    match_frame,
    pr_curve,
    recall_at_iou,
)
from bevkit.geom import Box3D

CAR = ObjectClass.CAR


def car(x, y=0.0, yaw=0.0, l=4.0, w=1.8):
    return Box3D(x, y, -0.9, l, w, 1.5, yaw)


def gt(box, **kw):
    return GtObject(CAR, box, **kw)


def test_identical_all_tp():
    boxes = [car(10), car(20, 3), car(30, -4, 1.0)]
    res = match_frame([ScoredBox(CAR, 0.9, b) for b in boxes], [gt(b) for b in boxes], cls=CAR)
    assert res.status == [TP, TP, TP] and all(res.gt_matched)
    assert res.iou == pytest.approx([1.0, 1.0, 1.0])


def test_no_detections():
    res = match_frame([], [gt(car(10))], cls=CAR)
    assert res.n_tp == 0 and res.n_gt == 1
    assert average_precision([res]) == 0.0


def test_duplicate_detection_is_fp():
    b = car(10)
    res = match_frame([ScoredBox(CAR, 0.8, b), ScoredBox(CAR, 0.9, b)], [gt(b)], cls=CAR)
    assert res.status == [FP, TP]


def test_below_threshold_is_fp():
    res = match_frame([ScoredBox(CAR, 0.9, car(11.0))], [gt(car(10))], iou_threshold=0.7, cls=CAR)
    assert res.status == [FP]  # IoU = 3/5
    res = match_frame([ScoredBox(CAR, 0.9, car(11.0))], [gt(car(10))], iou_threshold=0.5, cls=CAR)
    assert res.status == [TP]


def test_perfect_ap_and_aos():
    b = car(10, yaw=0.4)
    res = [match_frame([ScoredBox(CAR, 0.9, b)], [gt(b)], cls=CAR)]
    assert average_precision(res) == 1.0
    assert average_orientation_similarity(res) == pytest.approx(1.0)


def _sequence(seq, n_gt):
    gts = [gt(car(10.0 * (k + 1))) for k in range(n_gt)]
    dets, used = [], 0
    for k, hit in enumerate(seq):
        score = 1.0 - 0.01 * k
        if hit:
            dets.append(ScoredBox(CAR, score, gts[used].box3d))
            used += 1
        else:
            dets.append(ScoredBox(CAR, score, car(0.0, 40.0)))
    return [match_frame(dets, gts, cls=CAR)]


@pytest.mark.parametrize(
    "seq, n_gt, want",
    [
        ([1, 0], 1, 1.0),
        ([0, 1], 1, 0.5),
        ([1, 0, 1], 2, 28 / 33),
        ([0, 1, 1, 0, 1], 3, 106 / 165),
        ([1, 1, 0], 4, 6 / 11),
    ],
)
def test_ap_hand_fixtures(seq, n_gt, want):
    assert average_precision(_sequence(seq, n_gt)) == pytest.approx(want, abs=1e-12)


def test_aos_orientation():
    b = car(10, yaw=0.3, l=2.0, w=2.0)  # square, so a quarter turn keeps IoU at 1
    for dyaw, want in ((0.0, 1.0), (math.pi, 0.0), (math.pi / 2, 0.5)):
        d = Box3D(b.x, b.y, b.z, b.l, b.w, b.h, b.yaw + dyaw)
        res = [match_frame([ScoredBox(CAR, 0.9, d)], [gt(b)], cls=CAR)]
        assert average_precision(res) == 1.0
        assert average_orientation_similarity(res) == pytest.approx(want, abs=1e-12)


def test_recall_curve():
    boxes = [car(10), car(20)]
    frames = [([ScoredBox(CAR, 0.9, b) for b in boxes], [gt(b) for b in boxes])]
    curve = recall_at_iou(frames, [0.1, 0.5, 0.9, 1.0])
    assert curve.recall == (1.0, 1.0, 1.0, 1.0) and curve.n_gt == 2

    # a box with half the length nested inside the GT has IoU exactly 0.5
    g = car(10, l=4.0)
    d = car(9.0, l=2.0)
    curve = recall_at_iou([([ScoredBox(CAR, 0.9, d)], [gt(g)])], [0.45, 0.5 - 1e-9, 0.5 + 1e-9, 0.6])
    assert curve.recall == (1.0, 1.0, 0.0, 0.0)


def test_recall_curve_no_gt():
    curve = recall_at_iou([([ScoredBox(CAR, 0.9, car(10))], [])], [0.5, 0.7])
    assert curve.n_gt == 0 and all(math.isnan(r) for r in curve.recall)


def test_max_detections_limit():
    boxes = [car(10), car(20)]
    dets = [ScoredBox(CAR, 0.9, boxes[0]), ScoredBox(CAR, 0.5, boxes[1])]
    curve = recall_at_iou([(dets, [gt(b) for b in boxes])], [0.5], max_detections=1)
    assert curve.recall == (0.5,)


def test_difficulty_filter_ignores():
    hard = gt(car(10), image_bbox_height=30.0, occlusion=2)
    easy = gt(car(20))
    assert hard.difficulty == Difficulty.HARD
    dets = [ScoredBox(CAR, 0.9, hard.box3d), ScoredBox(CAR, 0.8, easy.box3d)]
    res = match_frame(dets, [hard, easy], cls=CAR, difficulty=Difficulty.EASY)
    assert res.status == [IGNORED, TP] and res.n_gt == 1
    assert average_precision([res]) == 1.0
    res = match_frame(dets, [hard, easy], cls=CAR, difficulty=Difficulty.HARD)
    assert res.status == [TP, TP] and res.n_gt == 2


def test_dontcare_region_ignores():
    region = GtObject(ObjectClass.DONTCARE, Box3D(0, 19, -1, 3, 3, 2, 0))
    det = ScoredBox(CAR, 0.9, car(0.0, 19.0, l=2.0, w=1.5))
    res = match_frame([det], [region, gt(car(10))], cls=CAR)
    assert res.status == [IGNORED]
    far = ScoredBox(CAR, 0.9, car(0.0, 30.0))
    assert match_frame([far], [region], cls=CAR).status == [FP]


def test_other_classes_dropped():
    ped = GtObject(ObjectClass.PEDESTRIAN, Box3D(5, 0, -1, 0.8, 0.6, 1.7, 0))
    res = match_frame([ScoredBox(CAR, 0.9, car(10))], [ped, gt(car(10))], cls=CAR)
    assert res.status == [TP] and res.n_gt == 1


def test_3d_criterion_uses_height():
    g = car(10)
    d = Box3D(g.x, g.y, g.z + 0.75, g.l, g.w, g.h, g.yaw)  # half the height overlaps -> 3D IoU 1/3
    res_bev = match_frame([ScoredBox(CAR, 0.9, d)], [gt(g)], Criterion.BEV, 0.7, CAR)
    res_3d = match_frame([ScoredBox(CAR, 0.9, d)], [gt(g)], Criterion.BOX3D, 0.7, CAR)
    assert res_bev.status == [TP] and res_3d.status == [FP]


def test_pr_curve():
    assert pr_curve(_sequence([0, 1], 1)) == [(0.0, 0.0), (1.0, 0.5)]
    assert pr_curve([match_frame([ScoredBox(CAR, 0.9, car(10))], [], cls=CAR)]) == []


def test_report_json_and_thresholds():
    b = car(10)
    frames = {"000000": ([ScoredBox(CAR, 0.9, car(11.0))], [gt(b)])}
    strict = evaluate(frames)
    loose = evaluate(frames, thresholds=CAR_05_THRESHOLDS)
    assert strict.entries[("Car", "Moderate", "bev")]["ap"] == 0.0
    assert loose.entries[("Car", "Moderate", "bev")]["ap"] == 1.0
    assert loose.entries[("Car", "Moderate", "bev")]["iou_threshold"] == 0.5
    # pedestrians have no GT: AP is reported as null, never as NaN
    text = json.dumps(strict.to_json(), allow_nan=False)
    row = [r for r in json.loads(text)["results"] if r["class"] == "Pedestrian"][0]
    assert row["ap"] is None
    assert "Car" in strict.table()


def test_empty_everything():
    rep = evaluate({"a": ([], [])})
    assert all(e["ap"] is None for e in rep.entries.values())
    assert np.isnan(average_precision([match_frame([], [], cls=CAR)]))
