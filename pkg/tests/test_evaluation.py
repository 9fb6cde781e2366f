import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cctn import evaluation as E
from cctn.geometry import Detection, OrientedBox

box = OrientedBox.from_xyxy
MSRA = E.MatchConfig(protocol="msra-oriented")


def test_area_overlap_examples():
    g = box(0, 0, 10, 10)
    assert E.area_overlap(g, g) == (1.0, 1.0)
    assert E.area_overlap(box(20, 20, 30, 30), g) == (0.0, 0.0)
    assert E.area_overlap(box(0, 0, 5, 10), g) == (0.5, 1.0)
    assert E.area_overlap(box(10, 0, 20, 10), g) == (0.0, 0.0)  # touching edge


def test_config_validation():
    with pytest.raises(ValueError):
        E.MatchConfig(protocol="voc")
    with pytest.raises(ValueError):
        E.MatchConfig(area_recall=0)
    with pytest.raises(ValueError):
        E.MatchConfig(many_penalty=1.5)


# ---------------------------------------------------------------- DetEval fixtures

def test_deteval_exact_match():
    gts = [box(0, 0, 10, 10), box(20, 0, 40, 8)]
    r = E.match_deteval(gts, gts)
    assert (r.precision, r.recall, r.f_measure) == (1.0, 1.0, 1.0)
    assert [m.kind for m in r.matches] == ["one-to-one"] * 2


def test_deteval_one_det_covering_two_gts():
    gts = [box(0, 0, 10, 10), box(12, 0, 22, 10)]
    r = E.match_deteval([box(0, 0, 22, 10)], gts)
    assert r.gt_score == pytest.approx(1.6) and r.det_score == pytest.approx(0.8)
    assert r.recall == pytest.approx(0.8) and r.precision == pytest.approx(0.8)
    assert [(m.dets, m.gts, m.kind) for m in r.matches] == [((0,), (0, 1), "many-to-one")]


def test_deteval_empty_detections():
    r = E.match_deteval([], [box(0, 0, 10, 10)])
    assert (r.precision, r.recall, r.f_measure) == (1.0, 0.0, 0.0)
    r = E.match_deteval([], [])
    assert (r.precision, r.recall, r.f_measure) == (1.0, 1.0, 1.0)
    r = E.match_deteval([box(0, 0, 1, 1)], [])
    assert (r.precision, r.recall) == (0.0, 1.0)


def test_deteval_split_gt():
    gt = [box(0, 0, 40, 10)]
    r = E.match_deteval([box(0, 0, 19, 10), box(21, 0, 40, 10)], gt)
    assert r.matches[0].kind == "one-to-many"
    assert r.recall == pytest.approx(0.8) and r.precision == pytest.approx(0.8)


def test_deteval_boxes_oriented_input():
    g = OrientedBox(20, 20, 20, 6, 0.0)
    d = Detection(OrientedBox(20, 20, 20, 6, 0.05), 0.9)
    assert E.match_deteval([d], [g]).f_measure == 1.0


def test_deteval_too_loose_box_rejected():
    r = E.match_deteval([box(0, 0, 30, 30)], [box(0, 0, 10, 10)])
    assert r.f_measure == 0.0  # precision 1/9 < 0.4


# ---------------------------------------------------------------- MSRA fixtures

def test_msra_identical():
    g = OrientedBox(50, 50, 40, 10, 0.3)
    r = E.match_msra([g], [g], MSRA)
    assert (r.precision, r.recall, r.f_measure) == (1.0, 1.0, 1.0)


def test_msra_rotated_by_quarter_pi_rejected():
    g = OrientedBox(50, 50, 40, 10, 0.0)
    d = OrientedBox(50, 50, 40, 10, math.pi / 4)
    assert E.match_msra([d], [g], MSRA).f_measure == 0.0


def test_msra_shrunk_to_70_percent_rejected():
    g = OrientedBox(50, 50, 40, 10, 0.2)
    d = OrientedBox(50, 50, 28, 7, 0.2)
    assert E.oriented_iou(d, g) == pytest.approx(0.49)
    assert E.match_msra([d], [g], MSRA).f_measure == 0.0
    d8 = OrientedBox(50, 50, 32, 8, 0.2)  # 0.64 > 0.5
    assert E.match_msra([d8], [g], MSRA).f_measure == 1.0


def test_msra_angle_equivalence_and_swap():
    g = OrientedBox(50, 50, 40, 10, math.pi / 2 - 0.01)
    d = OrientedBox(50, 50, 40, 10, -math.pi / 2 + 0.01)  # same direction of the line
    assert E.match_msra([d], [g], MSRA).f_measure == 1.0


def test_msra_one_to_one():
    g = OrientedBox(50, 50, 40, 10, 0.0)
    r = E.match_msra([g, g], [g], MSRA)
    assert r.recall == 1.0 and r.precision == 0.5


# ---------------------------------------------------------------- aggregation and report

def test_summarize_is_micro_average():
    a = E.match_deteval([box(0, 0, 10, 10)], [box(0, 0, 10, 10)])
    b = E.match_deteval([box(0, 0, 10, 10), box(50, 50, 60, 60), box(80, 80, 90, 90)],
                        [box(0, 0, 10, 10)])
    tot = E.summarize([a, b])
    assert tot.precision == pytest.approx(2 / 4) and tot.recall == 1.0
    assert tot.image_id == "ALL"


def test_format_report():
    a = E.match_deteval([box(0, 0, 10, 10)], [box(0, 0, 10, 10)])
    a.image_id = "img1"
    text = E.format_report([a])
    assert text == "img1 1.0000 1.0000 1.0000\nALL 1.0000 1.0000 1.0000\n"


def test_evaluate_dispatch():
    g = OrientedBox(50, 50, 40, 10, 0.0)
    assert E.evaluate([g], [g], MSRA).matches[0].kind == "one-to-one"
    assert E.evaluate([g], [g]).f_measure == 1.0


def test_count_false_regions():
    gts = [box(10, 10, 20, 20)]
    regions = [box(0, 0, 12, 12), box(40, 40, 50, 50)]
    assert E.count_false_regions(regions, gts, (60, 60)) == 1


# ---------------------------------------------------------------- properties

def random_boxes(rng, n):
    out = []
    for _ in range(n):
        x, y = rng.uniform(0, 80, 2)
        w, h = rng.uniform(4, 30, 2)
        out.append(box(x, y, x + w, y + h))
    return out


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 6), st.integers(0, 6))
def test_scores_bounded_and_order_invariant(seed, nd, ng):
    rng = np.random.default_rng(seed)
    gts = random_boxes(rng, ng)
    dets = random_boxes(rng, nd)
    # some exact and jittered copies so matches actually happen
    dets += [box(*(np.array(g.aabb()) + rng.normal(0, 1, 4))) for g in gts[: ng // 2]]
    for cfg in (E.MatchConfig(), MSRA):
        r = E.evaluate(dets, gts, cfg)
        assert 0 <= r.precision <= 1 and 0 <= r.recall <= 1 and 0 <= r.f_measure <= 1
        assert r.f_measure <= 2 * min(r.precision, r.recall) + 1e-12
        pd, pg = rng.permutation(len(dets)), rng.permutation(len(gts))
        r2 = E.evaluate([dets[i] for i in pd], [gts[i] for i in pg], cfg)
        assert (r2.precision, r2.recall) == pytest.approx((r.precision, r.recall))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_swap_symmetry_for_one_to_one(seed):
    rng = np.random.default_rng(seed)
    gts = [box(i * 40, 0, i * 40 + 30, 10) for i in range(4)]
    dets = [box(*(np.array(g.aabb()) + rng.uniform(-1, 1, 4))) for g in gts[: int(rng.integers(0, 5))]]
    dets.append(box(300, 300, 310, 310))
    a = E.match_deteval(dets, gts)
    b = E.match_deteval(gts, dets)
    assert all(m.kind == "one-to-one" for m in a.matches)
    assert (a.precision, a.recall) == pytest.approx((b.recall, b.precision))


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_duplicate_detection_never_helps(seed):
    rng = np.random.default_rng(seed)
    gts = random_boxes(rng, 3)
    dets = [box(*(np.array(g.aabb()) + rng.normal(0, 0.5, 4))) for g in gts] + random_boxes(rng, 2)
    for cfg in (E.MatchConfig(), MSRA):
        base = E.evaluate(dets, gts, cfg)
        for m in base.matches:
            dup = dets + [dets[m.dets[0]]]
            assert E.evaluate(dup, gts, cfg).f_measure <= base.f_measure + 1e-12


def test_union_fraction():
    g = box(0, 0, 10, 10)
    assert E.union_fraction([box(0, 0, 5, 10), box(0, 0, 5, 10)], g) == pytest.approx(0.5)
    assert E.union_fraction([box(0, 0, 6, 10), box(4, 0, 10, 10)], g) == pytest.approx(1.0)
    assert E.union_fraction([box(-5, -5, 5, 5), box(20, 20, 30, 30)], g) == pytest.approx(0.25)
    assert E.union_fraction([], g) == 0.0
