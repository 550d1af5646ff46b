"""KITTI-style evaluation on BEV and 3D box overlap: greedy matching, AP, AOS, recall vs IoU."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .cloud_io import EVAL_CLASSES, Difficulty, GtObject, ObjectClass
from .geom import Box3D, boxes3d_to_array, _iou_xy, iou_matrix_3d, iou_matrix_bev


class Criterion(str, enum.Enum):
    BEV = "bev"
    BOX3D = "3d"


DEFAULT_THRESHOLDS = {ObjectClass.CAR: 0.7, ObjectClass.PEDESTRIAN: 0.5, ObjectClass.CYCLIST: 0.5}
CAR_05_THRESHOLDS = {ObjectClass.CAR: 0.5, ObjectClass.PEDESTRIAN: 0.5, ObjectClass.CYCLIST: 0.5}
DONTCARE_MIN_COVER = 0.5

TP, FP, IGNORED = "TP", "FP", "ignored"


@dataclass(frozen=True)
class ScoredBox:
    """A detection ready for evaluation."""

    cls: ObjectClass
    score: float
    box: Box3D
    frame_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "cls", ObjectClass(self.cls))


@dataclass
class MatchResult:
    status: list  # per detection, in input order: TP / FP / ignored
    gt_index: list  # matched GT index or -1
    iou: list
    similarity: list  # (1 + cos dyaw) / 2 for TPs, 0 otherwise
    scores: list
    gt_matched: list  # per GT
    n_gt: int  # GTs that count toward recall

    @property
    def n_tp(self) -> int:
        return sum(s == TP for s in self.status)


def _gt_is_valid(gt: GtObject, cls: ObjectClass, difficulty: Difficulty | None) -> bool:
    if gt.cls != cls:
        return False
    if difficulty is None:
        return True
    return gt.difficulty is not None and gt.difficulty <= difficulty


def _overlap(criterion: Criterion, a, b) -> np.ndarray:
    if criterion == Criterion.BEV:
        return iou_matrix_bev(a, b)
    return iou_matrix_3d(a, b)


def _dontcare_cover(dets, regions) -> np.ndarray:
    """Fraction of each detection footprint covered by any DontCare region."""
    out = np.zeros(len(dets))
    if not regions:
        return out
    da = boxes3d_to_array(dets)[:, [0, 1, 3, 4, 6]]
    ra = boxes3d_to_array(regions)[:, [0, 1, 3, 4, 6]]
    for i in range(len(dets)):
        area = da[i, 2] * da[i, 3]
        best = 0.0
        for j in range(len(regions)):
            best = max(best, _iou_xy(da[i], ra[j])[1] / area)
        out[i] = best
    return out


def match_frame(
    dets,
    gts,
    criterion: Criterion = Criterion.BEV,
    iou_threshold: float = 0.7,
    cls: ObjectClass | None = None,
    difficulty: Difficulty | None = None,
) -> MatchResult:
    """Greedy score-ordered matching of one frame.

    When ``cls`` is given, only detections and GTs of that class take part
    (others are dropped from the result). GTs of the class that fail the
    difficulty filter are "ignored": a detection landing on one is neither TP nor FP.
    Detections mostly covered by a DontCare region are ignored too.
    """
    criterion = Criterion(criterion)
    if cls is None:
        classes = {d.cls for d in dets} | {g.cls for g in gts if g.cls != ObjectClass.DONTCARE}
        if len(classes) > 1:
            raise ValueError("match_frame without cls needs a single class")
        cls = next(iter(classes), ObjectClass.CAR)
    dets = [d for d in dets if d.cls == cls]
    cand = [g for g in gts if g.cls == cls]
    regions = [g.box3d for g in gts if g.cls == ObjectClass.DONTCARE and g.box3d is not None]
    valid = np.array([_gt_is_valid(g, cls, difficulty) for g in cand], dtype=bool)

    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    ious = _overlap(criterion, [d.box for d in dets], [g.box3d for g in cand]) if dets and cand else None
    cover = _dontcare_cover([d.box for d in dets], regions)

    status = [FP] * len(dets)
    gt_index = [-1] * len(dets)
    iou_out = [0.0] * len(dets)
    sim = [0.0] * len(dets)
    taken = np.zeros(len(cand), dtype=bool)
    for i in order:
        if ious is not None:
            row = np.where(valid & ~taken, ious[i], -1.0)
            j = int(np.argmax(row))
            if row[j] >= iou_threshold:
                taken[j] = True
                status[i] = TP
                gt_index[i] = j
                iou_out[i] = float(ious[i, j])
                sim[i] = 0.5 * (1.0 + math.cos(dets[i].box.yaw - cand[j].box3d.yaw))
                continue
            ign = np.where(~valid, ious[i], -1.0)
            if ign.size and ign.max() >= iou_threshold:
                status[i] = IGNORED
                continue
        if cover[i] > DONTCARE_MIN_COVER:
            status[i] = IGNORED
    return MatchResult(
        status=status,
        gt_index=gt_index,
        iou=iou_out,
        similarity=sim,
        scores=[d.score for d in dets],
        gt_matched=list(taken),
        n_gt=int(valid.sum()),
    )


def _pr_table(results):
    """Score-sorted cumulative (precision, recall, orientation similarity), plus the GT count."""
    scores, tp, sim = [], [], []
    n_gt = 0
    for res in results:
        n_gt += res.n_gt
        for st, sc, s in zip(res.status, res.scores, res.similarity):
            if st == IGNORED:
                continue
            scores.append(sc)
            tp.append(st == TP)
            sim.append(s)
    if not scores:
        return np.zeros(0), np.zeros(0), np.zeros(0), n_gt
    order = np.argsort(-np.asarray(scores), kind="stable")
    tp = np.asarray(tp, dtype=np.float64)[order]
    sim = np.asarray(sim, dtype=np.float64)[order]
    ctp = np.cumsum(tp)
    n = np.arange(1, len(tp) + 1)
    precision = ctp / n
    recall = ctp / n_gt if n_gt else np.full(len(tp), np.nan)
    aos_prec = np.cumsum(sim) / n
    return precision, recall, aos_prec, n_gt


def interpolated_average(values, recall, n_points: int = 11) -> float:
    """Mean over recall levels of the best value at recall >= level."""
    levels = np.linspace(0.0, 1.0, n_points)
    if len(values) == 0:
        return 0.0
    total = 0.0
    for r in levels:
        mask = recall >= r - 1e-12
        total += values[mask].max() if mask.any() else 0.0
    return total / n_points


def average_precision(results, n_points: int = 11) -> float:
    precision, recall, _, n_gt = _pr_table(results)
    if n_gt == 0:
        return math.nan
    return interpolated_average(precision, recall, n_points)


def average_orientation_similarity(results, n_points: int = 11) -> float:
    _, recall, aos_prec, n_gt = _pr_table(results)
    if n_gt == 0:
        return math.nan
    return interpolated_average(aos_prec, recall, n_points)


def pr_curve(results):
    precision, recall, _, n_gt = _pr_table(results)
    if n_gt == 0:
        return []
    return [(float(r), float(p)) for r, p in zip(recall, precision)]


@dataclass(frozen=True)
class RecallCurve:
    thresholds: tuple[float, ...]
    recall: tuple[float, ...]
    n_gt: int


def recall_at_iou(
    frames,
    thresholds,
    max_detections: int = 300,
    criterion: Criterion = Criterion.BEV,
    cls: ObjectClass = ObjectClass.CAR,
    difficulty: Difficulty | None = None,
) -> RecallCurve:
    """Fraction of GTs matched by each frame's top-``max_detections`` detections.

    ``frames`` is an iterable of ``(dets, gts)`` pairs.
    """
    thresholds = tuple(float(t) for t in thresholds)
    frames = list(frames)
    hits = np.zeros(len(thresholds))
    n_gt = 0
    for dets, gts in frames:
        dets = sorted((d for d in dets if d.cls == cls), key=lambda d: -d.score)[:max_detections]
        for k, thr in enumerate(thresholds):
            res = match_frame(dets, gts, criterion, thr, cls, difficulty)
            hits[k] += sum(res.gt_matched)
            if k == 0:
                n_gt += res.n_gt
    if n_gt == 0:
        return RecallCurve(thresholds, tuple(math.nan for _ in thresholds), 0)
    return RecallCurve(thresholds, tuple(float(h / n_gt) for h in hits), n_gt)


# ---------------------------------------------------------------- full report


@dataclass
class EvalReport:
    entries: dict = field(default_factory=dict)  # (class, difficulty, criterion) -> dict
    skipped_frames: list = field(default_factory=list)

    def to_json(self) -> dict:
        rows = []
        for (cls, diff, crit), v in sorted(self.entries.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2])):
            rows.append({"class": cls, "difficulty": diff, "criterion": crit, **v})
        return {"results": rows, "skipped_frames": self.skipped_frames}

    def table(self) -> str:
        lines = [f"{'class':<11}{'criterion':<10}{'thr':>5}  {'Easy':>7}{'Moder.':>8}{'Hard':>7}   AOS(E/M/H)"]
        keys = sorted({(c, cr) for c, _, cr in self.entries})
        for cls, crit in keys:
            ap = []
            aos = []
            thr = None
            for diff in ("Easy", "Moderate", "Hard"):
                e = self.entries.get((cls, diff, crit))
                thr = e["iou_threshold"] if e else thr
                ap.append(_pct(e["ap"]) if e else "   -")
                aos.append(_pct(e["aos"]) if e else "   -")
            lines.append(f"{cls:<11}{crit:<10}{thr:>5.2f}  {ap[0]:>7}{ap[1]:>8}{ap[2]:>7}   {'/'.join(aos)}")
        if self.skipped_frames:
            lines.append(f"skipped frames (no labels): {', '.join(self.skipped_frames)}")
        return "\n".join(lines)


def _pct(v):
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{100.0 * v:.2f}"


def evaluate(
    frames: dict,
    thresholds: dict | None = None,
    criteria=(Criterion.BEV, Criterion.BOX3D),
    classes=EVAL_CLASSES,
    n_points: int = 11,
    recall_thresholds=tuple(np.round(np.arange(0.1, 1.0001, 0.1), 2)),
) -> EvalReport:
    """``frames`` maps frame_id -> (detections, gts)."""
    thresholds = thresholds or DEFAULT_THRESHOLDS
    report = EvalReport()
    for crit in criteria:
        crit = Criterion(crit)
        for cls in classes:
            thr = thresholds[cls]
            for diff in Difficulty:
                results = [match_frame(d, g, crit, thr, cls, diff) for d, g in frames.values()]
                ap = average_precision(results, n_points)
                aos = average_orientation_similarity(results, n_points)
                curve = recall_at_iou(frames.values(), recall_thresholds, criterion=crit, cls=cls, difficulty=diff)
                report.entries[(cls.value, diff.name.capitalize(), crit.value)] = {
                    "iou_threshold": thr,
                    "ap": _nan_to_none(ap),
                    "aos": _nan_to_none(aos),
                    "n_gt": sum(r.n_gt for r in results),
                    "pr_curve": pr_curve(results),
                    "recall_at_iou": {
                        "thresholds": list(curve.thresholds),
                        "recall": [_nan_to_none(v) for v in curve.recall],
                    },
                }
    return report


def _nan_to_none(v):
    return None if isinstance(v, float) and math.isnan(v) else v
