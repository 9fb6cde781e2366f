import numpy as np
import pytest

from cctn import network as N
from cctn.tensor import ShapeError
from oracles import numeric_grad, rel_error


@pytest.fixture(scope="module")
def toy():
    g = N.build_cctn_graph("coarse", 0.125)
    return g, N.init_weights(g, 0, "he")


def test_paper_shapes_at_500():
    g = N.build_cctn_graph("coarse", 1.0)
    s = N.infer_shapes(g, 500, 500)
    assert s["pool4"] == (512, 31, 31)
    assert s["pool5"] == (512, 15, 15)
    assert s["up_pool5"][1:] == (30, 30)
    assert s["fuse"] == (512, 30, 30)
    assert s["upscore_tr"] == (2, 500, 500)
    assert s["rect_3x3"] == s["rect_3x7"] == s["rect_7x3"]


def test_graph_structure():
    g = N.build_cctn_graph("fine", 1.0)
    kinds = [lay.kind for lay in g.layers]
    assert kinds.count("maxpool2") == 5
    assert len([lay for lay in g.layers if lay.name.startswith("conv")]) == 10
    assert g.layer("rect_sum").inputs == ("relu_rect_3x3", "relu_rect_3x7", "relu_rect_7x3")
    assert g.layer("fuse").inputs == ("up_pool5", "pool4_crop")
    assert [h[0] for h in g.heads] == ["tl", "cl"]
    coarse = N.build_cctn_graph("coarse", 1.0)
    # identical up to the heads
    strip = lambda gr: [(l.name, l.kind, l.inputs, l.conv) for l in gr.layers if "score" not in l.name]
    assert strip(coarse) == strip(g)


def test_relu_1x1_options():
    assert "relu6" in N.build_cctn_graph("coarse", 0.125).layer_names
    assert "relu7" not in N.build_cctn_graph("coarse", 0.125).layer_names
    assert "relu7" in N.build_cctn_graph("coarse", 0.125, "both").layer_names
    assert "relu6" not in N.build_cctn_graph("coarse", 0.125, "none").layer_names


def test_invalid_multiplier_and_mode():
    for m in (0, -1, float("nan"), 1e-4):
        with pytest.raises(ValueError):
            N.build_cctn_graph("coarse", m)
    with pytest.raises(ValueError):
        N.build_cctn_graph("medium", 1.0)


def test_too_small_input(toy):
    g, w = toy
    with pytest.raises(ShapeError, match="at least 32"):
        N.forward(g, w, np.zeros((3, 31, 64)))


def test_toy_forward_shapes_and_range(toy):
    g, w = toy
    rng = np.random.default_rng(0)
    (heat,) = N.forward(g, w, N.prepare_image(rng.random((3, 96, 96))))
    assert heat.shape == (96, 96)
    assert heat.min() >= 0 and heat.max() <= 1
    fine = N.build_cctn_graph("fine", 0.125)
    maps = N.forward(fine, N.init_weights(fine, 1), N.prepare_image(rng.random((3, 70, 90))))
    assert len(maps) == 2 and maps[0].shape == maps[1].shape == (70, 90)


def test_random_sizes_keep_branches_equal():
    g = N.build_cctn_graph("coarse", 1.0)
    rng = np.random.default_rng(4)
    for _ in range(10):
        h, w = (int(v) for v in rng.integers(32, 700, 2))
        s = N.infer_shapes(g, h, w)
        assert s["rect_3x3"] == s["rect_3x7"] == s["rect_7x3"]
        assert s["upscore_tr"] == (2, h, w)


def test_init_statistics():
    g = N.build_cctn_graph("coarse", 1.0)
    w = N.init_weights(g, 0)
    big = w["conv4_2.weight"]
    assert big.size > 100_000
    assert abs(big.std() - 0.01) < 0.0005
    assert all(not np.any(w[k]) for k in w if k.endswith(".bias"))
    w2 = N.init_weights(g, 0)
    assert all(np.array_equal(w[k], w2[k]) for k in w)
    assert not np.array_equal(N.init_weights(g, 1)["conv1_1.weight"], w["conv1_1.weight"])


def test_weight_round_trip(tmp_path, toy):
    g, w = toy
    path = tmp_path / "w.cctn"
    N.save_weights(w, path)
    back = N.load_weights(path)
    assert sorted(back) == sorted(w)
    assert all(np.array_equal(back[k], w[k]) for k in w)
    raw = path.read_bytes()
    assert raw[:4] == b"CCTN"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == len(w)


def test_weight_file_errors(tmp_path, toy):
    g, w = toy
    good = tmp_path / "w.cctn"
    N.save_weights(w, good)
    data = good.read_bytes()
    cases = {"magic": b"XXXX" + data[4:], "version": data[:4] + (7).to_bytes(4, "little") + data[8:],
             "truncated": data[:-10], "trailing": data + b"\0\0"}
    for name, blob in cases.items():
        p = tmp_path / name
        p.write_bytes(blob)
        with pytest.raises(ValueError):
            N.load_weights(p)


def test_check_weights_and_graph_for_weights(toy):
    g, w = toy
    assert N.graph_for_weights(w).width_multiplier == 0.125
    bad = w.copy()
    bad["fc6.weight"] = bad["fc6.weight"][:, :-1]
    with pytest.raises(ShapeError):
        N.check_weights(g, bad)
    del bad["fc6.weight"]
    with pytest.raises(KeyError):
        N.check_weights(g, bad)


def test_fine_from_coarse_keeps_shared_layers(toy):
    g, w = toy
    fine = N.build_cctn_graph("fine", 0.125)
    fw = N.transfer_shared(w, N.init_weights(fine, 5))
    for k in fw:
        if k.startswith("score_"):
            continue
        assert np.array_equal(fw[k], w[k])
    assert "score_cl.weight" in fw


def test_translation_at_stride_granularity(toy):
    g, w = toy
    rng = np.random.default_rng(2)
    size = 448
    pattern = rng.random((3, 64, 64))

    def run(dy, dx):
        img = np.full((3, size, size), 0.3)
        img[:, 160 + dy:224 + dy, 160 + dx:224 + dx] = pattern
        acts, _ = N.run_forward(g, w, N.prepare_image(img))
        return acts

    base, pool4_shift, fused_shift = run(0, 0), run(16, 16), run(32, 32)
    # Pool-4 (stride 16): one-cell shift for 16 px
    a, b = base["pool4"], pool4_shift["pool4"]
    assert np.allclose(a[:, 8:18, 8:18], b[:, 9:19, 9:19], atol=1e-12)
    # score map (stride 16 but fed by the stride-32 path): two cells for 32 px
    a, b = base["score_tr"], fused_shift["score_tr"]
    assert np.allclose(a[:, 9:15, 9:15], b[:, 11:17, 11:17], atol=1e-10)


def test_network_gradient_matches_finite_differences():
    g = N.build_cctn_graph("fine", 1 / 64)
    w = N.init_weights(g, 3, "he")
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 40, 36)) * 0.5
    targets = ((rng.random((40, 36)) < 0.3).astype(float), rng.random((40, 36)))
    _, grads = N.loss_and_grads(g, w, x, targets, cl_weight=0.7)
    for key in ("score_cl.weight", "fc7.bias", "rect_7x3.weight", "conv1_1.bias"):
        def f(v, key=key):
            ww = dict(w)
            ww[key] = v
            return N.loss_and_grads(g, ww, x, targets, cl_weight=0.7)[0]
        assert rel_error(grads[key], numeric_grad(f, w[key])) < 1e-5, key


def test_target_head_mismatch(toy):
    g, w = toy
    data = [(np.zeros((3, 32, 32)), (np.zeros((32, 32)), np.zeros((32, 32))))]
    with pytest.raises(ValueError, match="1 head"):
        N.train(g, w, data, N.TrainParams(iterations=1))


def test_lr_zero_leaves_weights(toy):
    g, w = toy
    data = [(np.zeros((3, 32, 32)), np.zeros((32, 32)))]
    out, curve = N.train(g, w, data, N.TrainParams(lr=0.0, iterations=3))
    assert len(curve) == 3
    assert all(np.array_equal(out[k], w[k]) for k in w)


def test_training_is_deterministic_and_reduces_loss(toy):
    g, w = toy
    rng = np.random.default_rng(1)
    x = rng.random((3, 32, 32)) - 0.5
    t = np.zeros((32, 32))
    t[8:24, 4:28] = 1
    p = N.TrainParams(lr=1e-2, momentum=0.9, iterations=30, clip_norm=1.0)
    w1, c1 = N.train(g, w, [(x, t)], p)
    w2, c2 = N.train(g, w, [(x, t)], p)
    assert c1 == c2
    assert all(np.array_equal(w1[k], w2[k]) for k in w1)
    assert np.mean(c1[-5:]) < c1[0]


def test_gradient_clipping_bounds_the_step(toy):
    g, w = toy
    rng = np.random.default_rng(0)
    data = [(rng.random((3, 32, 32)), (rng.random((32, 32)) < 0.5).astype(float))]
    out, _ = N.train(g, w, data, N.TrainParams(lr=1.0, momentum=0.0, iterations=1, clip_norm=1e-3))
    step = np.sqrt(sum(np.sum((out[k] - w[k]) ** 2) for k in w))
    assert step == pytest.approx(1e-3, rel=1e-9)


def test_learning_rate_policies(toy):
    fixed = N.TrainParams(lr=0.1, iterations=10)
    assert [N.learning_rate(fixed, i) for i in (0, 9)] == [0.1, 0.1]
    poly = N.TrainParams(lr=0.1, iterations=10, lr_policy="poly", lr_power=2.0)
    assert N.learning_rate(poly, 0) == 0.1
    assert N.learning_rate(poly, 5) == pytest.approx(0.025)
    assert N.learning_rate(poly, 9) == pytest.approx(0.001)
    g, w = toy
    with pytest.raises(ValueError, match="lr_policy"):
        N.train(g, w, [(np.zeros((3, 32, 32)), np.zeros((32, 32)))],
                N.TrainParams(iterations=1, lr_policy="step"))


def test_config_parse_and_presets(tmp_path):
    cfg = N.parse_config("preset = toy\n# comment\nwidth_multiplier = 1/4\nseed = 9\nlr = 0.5  # inline\n"
                         "unknown_key = kept\n")
    assert cfg.width_multiplier == 0.25 and cfg.seed == 9 and cfg.lr == 0.5
    assert cfg.init == "he" and cfg.extra == {"unknown_key": "kept"}
    again = N.parse_config(N.dump_config(cfg))
    assert again == cfg
    with pytest.raises(ValueError, match="line 1"):
        N.parse_config("width_multiplier = abc")
    with pytest.raises(ValueError):
        N.parse_config("no equals sign")
    with pytest.raises(ValueError):
        N.parse_config("width_multiplier = 0")
    p = tmp_path / "c.cfg"
    p.write_text("mode = fine\n")
    assert N.load_config(p).build().mode == "fine"


def test_shipped_configs_load():
    import pathlib
    root = pathlib.Path(__file__).resolve().parent.parent / "configs"
    paper = N.load_config(root / "paper.cfg")
    assert paper.width_multiplier == 1.0 and paper.lr == 1e-10 and paper.momentum == 0.99
    assert paper.iterations == 200000 and paper.init_std == 0.01
    toy = N.load_config(root / "toy.cfg")
    assert toy.width_multiplier == 0.125
    assert toy.extra == {"working_size": "160", "fine_size": "288", "fine_pad": "29"}
    fine = N.load_config(root / "toy_fine.cfg")
    assert fine.mode == "fine" and fine.input_size == 288 and fine.augment and fine.lr_policy == "poly"
    assert fine.cl_weight == 4 and fine.fine_region_aspect == 5
