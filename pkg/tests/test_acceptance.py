"""Acceptance criteria; each test prints one PASS/FAIL line."""
import math
import os
import time

import numpy as np
import pytest

from cctn import cli, evaluation as E, geometry as G, network as N, rfcalc as R
from cctn import cascade as C, supervision as S, tensor as T, training as Tr
from cctn.geometry import OrientedBox
from cctn.tensor import ConvSpec
from oracles import flood_fill_components, naive_conv2d, numeric_grad, rel_error, sweep_min_area


@pytest.fixture
def report(capsys):
    def emit(n, title, ok, detail=""):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else ""))
        assert ok, f"acceptance {n} failed: {detail}"
    return emit


# ---------------------------------------------------------------- 1. gradient suite

def _away_from_zero(rng, shape, gap=1e-3):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, np.copysign(2 * gap, x), x)


def _distinct(rng, shape):
    # well separated values keep max-pool windows away from ties
    return rng.permutation(np.prod(shape)).reshape(shape) * 0.01 + rng.uniform(0, 1e-3, shape)


def _grad_cases():
    """(op name, case index) -> (function of x, analytic grad, x)."""

    def conv_input(rng):
        c, o = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        kh, kw = (int(v) for v in rng.choice([1, 3, 7], 2))
        spec = ConvSpec(kh, kw, int(rng.integers(0, kh // 2 + 1)), int(rng.integers(0, kw // 2 + 1)),
                        int(rng.integers(1, 3)), c, o)
        x = rng.standard_normal((c, int(rng.integers(kh, kh + 5)), int(rng.integers(kw, kw + 5))))
        w = rng.standard_normal(spec.weight_shape)
        b = rng.standard_normal(o)
        out = T.conv2d_forward(x, w, b, spec)
        up = rng.standard_normal(out.shape)
        dx, dw, db = T.conv2d_backward(x, w, spec, up)
        return [
            (lambda v: np.sum(T.conv2d_forward(v, w, b, spec) * up), dx, x),
            (lambda v: np.sum(T.conv2d_forward(x, v, b, spec) * up), dw, w),
            (lambda v: np.sum(T.conv2d_forward(x, w, v, spec) * up), db, b),
        ]

    def relu(rng):
        x = _away_from_zero(rng, (2, 5, 6))
        up = rng.standard_normal(x.shape)
        return [(lambda v: np.sum(T.relu(v) * up), T.relu_backward(x, up), x)]

    def maxpool(rng):
        x = _distinct(rng, (2, int(rng.integers(2, 8)), int(rng.integers(2, 8))))
        out, arg = T.maxpool2(x)
        up = rng.standard_normal(out.shape)
        return [(lambda v: np.sum(T.maxpool2(v)[0] * up), T.maxpool2_backward(up, arg, x.shape), x)]

    def eltwise(rng):
        xs = [rng.standard_normal((2, 4, 5)) for _ in range(3)]
        up = rng.standard_normal((2, 4, 5))
        return [(lambda v, i=i: np.sum(T.eltwise_sum(xs[:i] + [v] + xs[i + 1:]) * up), up, xs[i])
                for i in range(3)]

    def upsample(rng):
        x = rng.standard_normal((2, int(rng.integers(1, 6)), int(rng.integers(1, 6))))
        up = rng.standard_normal((2, 2 * x.shape[1], 2 * x.shape[2]))
        return [(lambda v: np.sum(T.upsample2x_bilinear(v) * up),
                 T.upsample2x_bilinear_backward(up, x.shape), x)]

    def upscore(rng):
        x = rng.standard_normal((2, int(rng.integers(2, 5)), int(rng.integers(2, 5))))
        oh, ow = 16 * x.shape[1] + int(rng.integers(-8, 8)), 16 * x.shape[2] + int(rng.integers(-8, 8))
        off = (float(rng.integers(0, 2)), float(rng.integers(0, 2)))
        up = rng.standard_normal((2, oh, ow))
        f = lambda v: np.sum(T.resize_bilinear(v, oh, ow, 16.0, 16.0, *off) * up)  # noqa: E731
        return [(f, T.resize_bilinear_backward(up, x.shape, 16.0, 16.0, *off), x)]

    def crop(rng):
        x = rng.standard_normal((2, int(rng.integers(3, 9)), int(rng.integers(3, 9))))
        th, tw = int(rng.integers(1, x.shape[1] + 1)), int(rng.integers(1, x.shape[2] + 1))
        up = rng.standard_normal((2, th, tw))
        return [(lambda v: np.sum(T.crop_center(v, th, tw) * up), T.crop_center_backward(up, x.shape), x)]

    def softmax_loss(rng):
        x = rng.standard_normal((2, 5, 6)) * 3
        t = (rng.random((5, 6)) < 0.4).astype(float)
        cw = None if rng.random() < 0.5 else (float(rng.uniform(0.5, 2)), float(rng.uniform(0.5, 2)))
        return [(lambda v: T.softmax_xent_loss(v, t, cw)[0], T.softmax_xent_loss(x, t, cw)[1], x)]

    def sigmoid_loss(rng):
        x = rng.standard_normal((1, 5, 6)) * 3
        t = rng.random((5, 6))
        return [(lambda v: T.bce_loss(v, t)[0], T.bce_loss(x, t)[1], x)]

    return {"conv2d": conv_input, "relu": relu, "maxpool2": maxpool, "eltwise_sum": eltwise,
            "upsample2x": upsample, "upscore16": upscore, "crop_center": crop,
            "softmax_xent": softmax_loss, "sigmoid_xent": sigmoid_loss}


def test_1_gradient_suite(report):
    t0 = time.perf_counter()
    worst = {}
    for k, (name, make) in enumerate(_grad_cases().items()):
        rng = np.random.default_rng([1, k])
        errs = []
        for _ in range(20):
            for f, analytic, x in make(rng):
                errs.append(rel_error(analytic, numeric_grad(f, x)))
        worst[name] = max(errs)
    elapsed = time.perf_counter() - t0
    ok = all(v < 1e-4 for v in worst.values()) and elapsed < 60
    detail = f"worst rel err {max(worst.values()):.2e} over {len(worst)} ops x 20 cases, {elapsed:.1f}s"
    report(1, "gradient suite", ok, detail)


# ---------------------------------------------------------------- 2. shape audit

def test_2_shape_audit(report):
    g = N.build_cctn_graph("coarse", 1.0)
    s = N.infer_shapes(g, 500, 500)
    ok = s["pool4"][1:] == (31, 31) and s["pool5"][1:] == (15, 15) and s["upscore_tr"][1:] == (500, 500)
    rng = np.random.default_rng(2)
    sizes = []
    for _ in range(10):
        h, w = (int(v) for v in rng.integers(32, 800, 2))
        sh = N.infer_shapes(g, h, w)
        sizes.append((h, w))
        ok = ok and sh["rect_3x3"] == sh["rect_3x7"] == sh["rect_7x3"] and sh["upscore_tr"][1:] == (h, w)
    fine = N.infer_shapes(N.build_cctn_graph("fine", 1.0), 500, 500)
    ok = ok and fine["upscore_tl"] == (2, 500, 500) and fine["upscore_cl"] == (1, 500, 500)
    report(2, "shape audit", ok, f"pool4 {s['pool4'][1:]}, pool5 {s['pool5'][1:]}, 10 random sizes")


# ---------------------------------------------------------------- 3. convolution oracle

def test_3_convolution_oracle(report):
    rng = np.random.default_rng(3)
    worst = 0.0
    kernels = [(1, 1), (3, 3), (3, 7), (7, 3), (5, 5), (7, 7), (1, 3), (2, 2)]
    for i in range(200):
        kh, kw = kernels[i % len(kernels)] if i < 80 else (int(rng.integers(1, 8)), int(rng.integers(1, 8)))
        c, o = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        ph, pw = int(rng.integers(0, kh // 2 + 1)), int(rng.integers(0, kw // 2 + 1))
        stride = int(rng.integers(1, 3))
        h = int(rng.integers(max(1, kh - 2 * ph), 12))
        w = int(rng.integers(max(1, kw - 2 * pw), 12))
        x = rng.standard_normal((c, h, w))
        wt = rng.standard_normal((o, c, kh, kw))
        b = rng.standard_normal(o)
        got = T.conv2d_forward(x, wt, b, ConvSpec(kh, kw, ph, pw, stride, c, o))
        ref = naive_conv2d(x, wt, b, ph, pw, stride)
        worst = max(worst, float(np.abs(got - ref).max()))
    report(3, "convolution oracle", worst <= 1e-10, f"200 configs, max abs diff {worst:.1e}")


# ---------------------------------------------------------------- 4. geometry oracles

def test_4_geometry_oracles(report):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        pts = rng.normal(0, 1, (int(rng.integers(3, 50)), 2)) * rng.uniform(0.5, 30, 2)
        if rng.random() < 0.5:
            th = rng.uniform(0, math.pi)
            pts = pts @ np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        ref = sweep_min_area(pts)
        worst = max(worst, abs(G.min_area_rect_points(pts).area - ref) / ref)
    mar_ok = worst <= 1e-6

    cc_ok = True
    for _ in range(100):
        mask = rng.random((int(rng.integers(1, 30)), int(rng.integers(1, 30)))) < rng.uniform(0.1, 0.7)
        ours = [sorted(zip(c.rows.tolist(), c.cols.tolist())) for c in G.connected_components(mask)]
        cc_ok = cc_ok and ours == flood_fill_components(mask)

    def comp(h, w):
        m = np.zeros((h + 2, w + 2), bool)
        m[1:h + 1, 1:w + 1] = True
        return G.connected_components(m)[0]

    bar = G.coarse_decide(comp(20, 200))
    blob = G.coarse_decide(comp(40, 60))
    dot = G.coarse_decide(comp(1, 1))
    fix_ok = (isinstance(bar, G.FinalLine) and bar.box.aabb() == (1, 1, 201, 21)
              and isinstance(blob, G.Region) and blob.side == pytest.approx(72.0)
              and isinstance(dot, G.Region))
    report(4, "geometry oracles", mar_ok and cc_ok and fix_ok,
           f"MAR worst rel {worst:.1e}, components {'ok' if cc_ok else 'differ'}, "
           f"fixtures {'ok' if fix_ok else 'differ'}")


# ---------------------------------------------------------------- 5. overfit

# frozen from the toy experiment: full-batch descent over the 10 samples,
# heavy-ball momentum with a poly-decayed step
OVERFIT_SCENE = S.SceneSpec(size=(96, 96), line_height=(32.0, 40.0), min_lines=1, max_lines=1,
                            paragraph_p=0.0, distractors=2, margin=12.0, max_length=0.6)
OVERFIT_PARAMS = N.TrainParams(lr=1e-2, momentum=0.99, iterations=2000, batch_size=10, clip_norm=1.0,
                               lr_policy="poly", lr_power=2.0)


@pytest.mark.slow
def test_5_overfit(report):
    data = []
    for i in range(10):
        img, ann = S.generate_synthetic_scene(np.random.default_rng(100 + i), 0.3, OVERFIT_SCENE)
        data.append((N.prepare_image(img), S.region_mask(ann)))
    g = N.build_cctn_graph("coarse", 1 / 8)
    t0 = time.perf_counter()
    _, curve = N.train(g, N.init_weights(g, 0, "he"), data, OVERFIT_PARAMS)
    elapsed = time.perf_counter() - t0
    smooth = np.convolve(curve, np.ones(50) / 50, mode="valid")
    rises = int(np.sum(np.diff(smooth) > 0))
    final = smooth[-1]
    ok = final < 0.01 and rises == 0 and elapsed < 600
    report(5, "overfit", ok, f"smoothed final loss {final:.5f}, {rises} rises of the 50-iter average, "
           f"{elapsed:.0f}s")


# ---------------------------------------------------------------- 6. synthetic end-to-end

CONFIGS = os.path.join(os.path.dirname(__file__), os.pardir, "configs")


def _scenes(seed, n):
    return [(f"s{i:03d}",) + S.generate_synthetic_scene(np.random.default_rng([seed, i]), 0.5)
            for i in range(n)]


@pytest.mark.slow
def test_6_synthetic_end_to_end(report):
    t0 = time.perf_counter()
    coarse_cfg = N.load_config(os.path.join(CONFIGS, "toy.cfg"))
    fine_cfg = N.load_config(os.path.join(CONFIGS, "toy_fine.cfg"))
    train, held_out = _scenes(1, 200), _scenes(2, 50)
    cw, _ = Tr.train_stage(coarse_cfg, "coarse", train)
    fw, _ = Tr.train_stage(fine_cfg, "fine", train, init=cw)
    models = C.Models(N.graph_for_weights(cw), cw, N.graph_for_weights(fw), fw)
    pipe = {k: int(v) for k, v in coarse_cfg.extra.items()}
    scores = {}
    for name, coarse_only in (("cascade", False), ("coarse-only", True)):
        cfg = C.PipelineConfig(coarse_only=coarse_only, **pipe)
        reps = [E.evaluate(C.detect(img, cfg, models).detections, ann.boxes) for _, img, ann in held_out]
        scores[name] = E.summarize(reps)
    elapsed = time.perf_counter() - t0
    full, coarse = scores["cascade"].f_measure, scores["coarse-only"].f_measure
    ok = full >= 0.75 and coarse <= full - 0.10 and elapsed < 1800
    report(6, "synthetic end-to-end", ok,
           f"cascade P/R/F {scores['cascade'].precision:.3f}/{scores['cascade'].recall:.3f}/{full:.3f}, "
           f"coarse-only F {coarse:.3f}, {elapsed:.0f}s")


# ---------------------------------------------------------------- 7. receptive field audit

def test_7_receptive_field_audit(report, capsys):
    from test_rfcalc import TOY_GRAPHS
    ok = True
    for g in TOY_GRAPHS.values():
        last = g.layers[-1].name
        s = R.analytic_rf(g, last)
        fp = R.empirical_rf(g, None, last)
        ok = ok and (fp.rf_h, fp.rf_w) == (s.rf_h, s.rf_w)
    assert cli.main(["rf"]) == 0
    out = capsys.readouterr().out
    printed = "analytic pool5 212x212" in out and "claimed pool5 403x403" in out and "note:" in out
    report(7, "receptive-field audit", ok and printed,
           "empirical == analytic on 3 branch-free graphs; report shows both pool5 figures")


# ---------------------------------------------------------------- 8. evaluation harness

def test_8_evaluation_fixtures(report):
    box = OrientedBox.from_xyxy
    gts = [box(0, 0, 10, 10), box(20, 0, 40, 8)]
    a = E.match_deteval(gts, gts)
    b = E.match_deteval([box(0, 0, 22, 10)], [box(0, 0, 10, 10), box(12, 0, 22, 10)])
    c = E.match_deteval([], [box(0, 0, 10, 10)])
    det_ok = ((a.precision, a.recall, a.f_measure) == (1, 1, 1)
              and b.gt_score == pytest.approx(1.6) and b.recall == pytest.approx(0.8)
              and (c.recall, c.f_measure) == (0, 0))
    cfg = E.MatchConfig(protocol="msra-oriented")
    g = OrientedBox(50, 50, 40, 10, 0.3)
    m1 = E.match_msra([g], [g], cfg).f_measure == 1.0
    m2 = E.match_msra([OrientedBox(50, 50, 40, 10, 0.3 + math.pi / 4)], [g], cfg).f_measure == 0.0
    shrunk = OrientedBox(50, 50, 28, 7, 0.3)
    m3 = E.oriented_iou(shrunk, g) == pytest.approx(0.49) and E.match_msra([shrunk], [g], cfg).f_measure == 0.0
    report(8, "evaluation fixtures", det_ok and m1 and m2 and m3, "3 DetEval + 3 oriented fixtures")


# ---------------------------------------------------------------- 9. determinism

def test_9_detect_determinism(report, tmp_path, capsys):
    data = tmp_path / "data"
    assert cli.main(["synth", "--n", "3", "--out", str(data), "--seed", "9", "--size", "96"]) == 0
    paths = {}
    for mode in ("coarse", "fine"):
        g = N.build_cctn_graph(mode, 1 / 16)
        paths[mode] = str(tmp_path / f"{mode}.cctn")
        N.save_weights(N.init_weights(g, 7, "he"), paths[mode])
    out, heat = tmp_path / "det", tmp_path / "heat"
    argv = ["detect", "--coarse", paths["coarse"], "--fine", paths["fine"], "--image-dir",
            str(data / "images"), "--out", str(out), "--emit-heatmaps", str(heat)]
    assert cli.main(argv) == 0

    def snapshot():
        return {f"{d.name}/{p}": (d / p).read_bytes() for d in (out, heat) for p in sorted(os.listdir(d))
                if p != "manifest.json"}

    first = snapshot()
    assert cli.main(["rerun", str(out / "manifest.json")]) == 0
    second = snapshot()
    n_det = sum(k.startswith("det/") for k in first)
    n_heat = sum(k.startswith("heat/") for k in first)
    report(9, "detect determinism", first == second and n_det == 3 and n_heat >= 6,
           f"{n_det} detection files and {n_heat} heat-maps byte-identical across runs")
