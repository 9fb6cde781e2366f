"""Precision / recall / F-measure for text detections.

Two protocols: the DetEval-style area-overlap matcher used for horizontal
text benchmarks, and an oriented-box IoU matcher for multi-oriented text.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Detection


@dataclass(frozen=True)
class MatchConfig:
    protocol: str = "icdar-deteval"
    area_recall: float = 0.8  # tr
    area_precision: float = 0.4  # tp
    many_penalty: float = 0.8  # k
    iou: float = 0.5
    angle_tol: float = math.pi / 8

    def __post_init__(self):
        if self.protocol not in ("icdar-deteval", "msra-oriented"):
            raise ValueError(f"unknown protocol {self.protocol!r}")
        for name in ("area_recall", "area_precision", "many_penalty", "iou"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if not self.angle_tol > 0:
            raise ValueError("angle tolerance must be positive")


@dataclass
class Match:
    dets: tuple
    gts: tuple
    kind: str  # one-to-one, one-to-many, many-to-one


@dataclass
class EvalReport:
    precision: float
    recall: float
    f_measure: float
    det_score: float = 0.0
    gt_score: float = 0.0
    n_det: int = 0
    n_gt: int = 0
    matches: list = field(default_factory=list)
    image_id: str = ""


def f_measure(p, r):
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def _report(det_score, gt_score, n_det, n_gt, matches=(), image_id=""):
    p = det_score / n_det if n_det else 1.0
    r = gt_score / n_gt if n_gt else 1.0
    return EvalReport(p, r, f_measure(p, r), det_score, gt_score, n_det, n_gt, list(matches), image_id)


def _box(b):
    return b.box if isinstance(b, Detection) else b


def area_overlap(det, gt):
    """Intersection of axis-aligned bounds over gt area and over det area."""
    dx1, dy1, dx2, dy2 = _box(det).aabb()
    gx1, gy1, gx2, gy2 = _box(gt).aabb()
    iw = min(dx2, gx2) - max(dx1, gx1)
    ih = min(dy2, gy2) - max(dy1, gy1)
    inter = iw * ih if iw > 0 and ih > 0 else 0.0
    ga = (gx2 - gx1) * (gy2 - gy1)
    da = (dx2 - dx1) * (dy2 - dy1)
    return (inter / ga if ga > 0 else 0.0, inter / da if da > 0 else 0.0)


def overlap_tables(dets, gts):
    """``recall[g, d]`` and ``precision[g, d]`` area fractions."""
    rec = np.zeros((len(gts), len(dets)))
    prec = np.zeros((len(gts), len(dets)))
    for i, g in enumerate(gts):
        for j, d in enumerate(dets):
            rec[i, j], prec[i, j] = area_overlap(d, g)
    return rec, prec


def union_fraction(dets, gt):
    """Area of the union of axis-aligned ``dets`` inside ``gt``, over the gt area."""
    gx1, gy1, gx2, gy2 = gt.aabb()
    rects = []
    for d in dets:
        x1, y1, x2, y2 = d.aabb()
        x1, y1, x2, y2 = max(x1, gx1), max(y1, gy1), min(x2, gx2), min(y2, gy2)
        if x2 > x1 and y2 > y1:
            rects.append((x1, y1, x2, y2))
    area = (gx2 - gx1) * (gy2 - gy1)
    if not rects or area <= 0:
        return 0.0
    xs = sorted({v for r in rects for v in (r[0], r[2])})
    ys = sorted({v for r in rects for v in (r[1], r[3])})
    covered = 0.0
    for xa, xb in zip(xs, xs[1:]):
        for ya, yb in zip(ys, ys[1:]):
            if any(r[0] <= xa and xb <= r[2] and r[1] <= ya and yb <= r[3] for r in rects):
                covered += (xb - xa) * (yb - ya)
    return covered / area


def match_deteval(dets, gts, config=None):
    """DetEval-style matching of axis-aligned boxes (oriented input is boxed first).

    One-to-one pairs (recall >= tr and precision >= tp, and no other pair in
    the same row or column qualifying) score 1 on both sides.
    A gt split over several detections (each precision >= tp, summed recall
    >= tr) scores k for the gt and k for each detection, less any redundant
    overlap among those detections; a detection
    covering several gts (each recall >= tr, summed precision >= tp) scores
    k for each gt and k for the detection.  Every stage resolves greedily in
    descending overlap order with index tie-breaks.
    """
    cfg = config or MatchConfig()
    dets = [_box(d).axis_aligned() for d in dets]
    gts = [_box(g).axis_aligned() for g in gts]
    nd, ng = len(dets), len(gts)
    if nd == 0 or ng == 0:
        return _report(0.0, 0.0, nd, ng)
    rec, prec = overlap_tables(dets, gts)
    tr, tp, k = cfg.area_recall, cfg.area_precision, cfg.many_penalty
    gt_done = np.zeros(ng, bool)
    det_done = np.zeros(nd, bool)
    det_score = gt_score = 0.0
    matches = []

    # one-to-one: the pair is the only qualifying entry in its row and column
    ok = (rec >= tr) & (prec >= tp)
    unique = ok & (ok.sum(axis=1, keepdims=True) == 1) & (ok.sum(axis=0, keepdims=True) == 1)
    pairs = [(-(rec[i, j] + prec[i, j]), i, j) for i, j in zip(*np.nonzero(unique))]
    for _, i, j in sorted(pairs):
        if not gt_done[i] and not det_done[j]:
            gt_done[i] = det_done[j] = True
            gt_score += 1.0
            det_score += 1.0
            matches.append(Match((j,), (i,), "one-to-one"))

    # a gt split over several detections
    groups = []
    for i in range(ng):
        cand = [j for j in range(nd) if not det_done[j] and prec[i, j] >= tp and rec[i, j] > 0]
        total = sum(rec[i, j] for j in cand)
        if len(cand) >= 2 and total >= tr:
            groups.append((-total, i, cand))
    for _, i, cand in sorted(groups, key=lambda t: (t[0], t[1])):
        cand = [j for j in cand if not det_done[j]]
        if gt_done[i] or len(cand) < 2 or sum(rec[i, j] for j in cand) < tr:
            continue
        gt_done[i] = True
        det_done[cand] = True
        gt_score += k
        # k per detection, scaled down by the share of coverage that is redundant
        cover = union_fraction([dets[j] for j in cand], gts[i])
        det_score += k * len(cand) * cover / sum(rec[i, j] for j in cand)
        matches.append(Match(tuple(cand), (i,), "one-to-many"))

    # a detection covering several gts
    groups = []
    for j in range(nd):
        if det_done[j]:
            continue
        cand = [i for i in range(ng) if not gt_done[i] and rec[i, j] >= tr]
        total = sum(prec[i, j] for i in cand)
        if len(cand) >= 2 and total >= tp:
            groups.append((-total, j, cand))
    for _, j, cand in sorted(groups, key=lambda t: (t[0], t[1])):
        cand = [i for i in cand if not gt_done[i]]
        if len(cand) < 2 or sum(prec[i, j] for i in cand) < tp:
            continue
        det_done[j] = True
        gt_done[cand] = True
        gt_score += k * len(cand)
        det_score += k
        matches.append(Match((j,), tuple(cand), "many-to-one"))

    return _report(det_score, gt_score, nd, ng, matches)


def _angle_diff(a, b):
    d = (a - b) % math.pi
    return min(d, math.pi - d)


def oriented_iou(det, gt):
    """IoU after rotating both boxes about the gt centre into the gt frame.

    The gt becomes axis-aligned; the detection keeps its size and its
    rotated centre, and its residual tilt is left to the angle test.
    """
    det, gt = _box(det), _box(gt)
    c, s = math.cos(-gt.angle), math.sin(-gt.angle)
    dx, dy = det.cx - gt.cx, det.cy - gt.cy
    cx, cy = gt.cx + c * dx - s * dy, gt.cy + s * dx + c * dy
    # pick the detection's extents matching the gt axes
    if _angle_diff(det.angle, gt.angle) <= math.pi / 4:
        w, h = det.w, det.h
    else:
        w, h = det.h, det.w
    iw = min(cx + w / 2, gt.cx + gt.w / 2) - max(cx - w / 2, gt.cx - gt.w / 2)
    ih = min(cy + h / 2, gt.cy + gt.h / 2) - max(cy - h / 2, gt.cy - gt.h / 2)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (w * h + gt.w * gt.h - inter)


def match_msra(dets, gts, config=None):
    """Oriented matching: IoU above threshold and orientation within tolerance, one-to-one."""
    cfg = config or MatchConfig(protocol="msra-oriented")
    dets = [_box(d) for d in dets]
    gts = [_box(g) for g in gts]
    pairs = []
    for i, g in enumerate(gts):
        for j, d in enumerate(dets):
            if _angle_diff(d.angle, g.angle) >= cfg.angle_tol:
                continue
            iou = oriented_iou(d, g)
            if iou > cfg.iou:
                pairs.append((-iou, i, j))
    gt_done, det_done = set(), set()
    matches = []
    for _, i, j in sorted(pairs):
        if i not in gt_done and j not in det_done:
            gt_done.add(i)
            det_done.add(j)
            matches.append(Match((j,), (i,), "one-to-one"))
    n = float(len(matches))
    return _report(n, n, len(dets), len(gts), matches)


def evaluate(dets, gts, config=None):
    cfg = config or MatchConfig()
    if cfg.protocol == "msra-oriented":
        return match_msra(dets, gts, cfg)
    return match_deteval(dets, gts, cfg)


def summarize(reports):
    """Micro-average: pool the scores and counts of all images, then divide."""
    reports = list(reports)
    return _report(sum(r.det_score for r in reports), sum(r.gt_score for r in reports),
                   sum(r.n_det for r in reports), sum(r.n_gt for r in reports), image_id="ALL")


def format_report(reports, total=None):
    lines = [f"{r.image_id} {r.precision:.4f} {r.recall:.4f} {r.f_measure:.4f}" for r in reports]
    total = total or summarize(reports)
    lines.append(f"ALL {total.precision:.4f} {total.recall:.4f} {total.f_measure:.4f}")
    return "\n".join(lines) + "\n"


def count_false_regions(regions, gts, shape):
    """Regions whose pixels contain no ground-truth text pixel at all."""
    text = np.zeros(shape, dtype=bool)
    for g in gts:
        text |= _box(g).pixel_mask(shape)
    return sum(1 for r in regions if not np.any(text & _box(r).pixel_mask(shape)))
