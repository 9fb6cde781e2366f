"""CCTN graph construction, inference and training.

The graph is VGG-16 blocks 1-4, a parallel block of 3x3 / 3x7 / 7x3
convolutions summed and pooled into a new Pool-5, two 1x1 convolutions, a
2x upsample fused with (centre-cropped) Pool-4, and 1x1 score heads that are
bilinearly resized to input resolution.
"""
import struct
import time
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction

import numpy as np

from cctn import tensor as T
from cctn.tensor import ConvSpec, ShapeError

MIN_INPUT = 32  # every maxpool2 needs an input extent >= 2
STRIDE = 16  # total stride of the fused score map (Pool-4 resolution)

VGG_BLOCKS = ((64, 2), (128, 2), (256, 3), (512, 3))
RECT_KERNELS = (("rect_3x3", 3, 3, 1, 1), ("rect_3x7", 3, 7, 1, 3), ("rect_7x3", 7, 3, 3, 1))
HEADS = {
    "coarse": (("tr", 2, "softmax"),),
    "fine": (("tl", 2, "softmax"), ("cl", 1, "sigmoid")),
}


@dataclass(frozen=True)
class Layer:
    name: str
    kind: str
    inputs: tuple = ()
    conv: ConvSpec | None = None


@dataclass
class NetworkGraph:
    mode: str
    width_multiplier: float
    layers: list
    heads: tuple  # (head name, score layer name, activation)
    relu_1x1: str = "first"

    def layer(self, name):
        for lay in self.layers:
            if lay.name == name:
                return lay
        raise KeyError(f"no layer named {name!r}")

    def conv_layers(self):
        return [lay for lay in self.layers if lay.kind == "conv"]

    @property
    def layer_names(self):
        return [lay.name for lay in self.layers]


def _width(c, m):
    w = int(round(c * m))
    if w < 1:
        raise ValueError(f"width multiplier {m} leaves {c}-channel layer with no channels")
    return w


def build_cctn_graph(mode="coarse", width_multiplier=1.0, relu_1x1="first"):
    if mode not in HEADS:
        raise ValueError(f"mode must be one of {sorted(HEADS)}, got {mode!r}")
    m = float(width_multiplier)
    if not m > 0 or not np.isfinite(m):
        raise ValueError(f"width multiplier must be a positive number, got {width_multiplier!r}")
    if relu_1x1 not in ("first", "both", "none"):
        raise ValueError(f"relu_1x1 must be first|both|none, got {relu_1x1!r}")

    layers = [Layer("input", "input")]
    prev, c_in = "input", 3
    for b, (c, n) in enumerate(VGG_BLOCKS, 1):
        c_out = _width(c, m)
        for i in range(1, n + 1):
            name = f"conv{b}_{i}"
            layers.append(Layer(name, "conv", (prev,), ConvSpec(3, 3, 1, 1, 1, c_in, c_out)))
            layers.append(Layer(f"relu{b}_{i}", "relu", (name,)))
            prev, c_in = f"relu{b}_{i}", c_out
        layers.append(Layer(f"pool{b}", "maxpool2", (prev,)))
        prev = f"pool{b}"

    c5 = _width(512, m)
    branches = []
    for name, kh, kw, ph, pw in RECT_KERNELS:
        layers.append(Layer(name, "conv", ("pool4",), ConvSpec(kh, kw, ph, pw, 1, c_in, c5)))
        layers.append(Layer(f"relu_{name}", "relu", (name,)))
        branches.append(f"relu_{name}")
    layers.append(Layer("rect_sum", "eltwise_sum", tuple(branches)))
    layers.append(Layer("pool5", "maxpool2", ("rect_sum",)))
    layers.append(Layer("fc6", "conv", ("pool5",), ConvSpec(1, 1, 0, 0, 1, c5, c5)))
    prev = "fc6"
    if relu_1x1 in ("first", "both"):
        layers.append(Layer("relu6", "relu", ("fc6",)))
        prev = "relu6"
    # fc7 must match Pool-4's width for the element-wise fusion
    layers.append(Layer("fc7", "conv", (prev,), ConvSpec(1, 1, 0, 0, 1, c5, c_in)))
    prev = "fc7"
    if relu_1x1 == "both":
        layers.append(Layer("relu7", "relu", ("fc7",)))
        prev = "relu7"
    layers.append(Layer("up_pool5", "upsample2x", (prev,)))
    layers.append(Layer("pool4_crop", "crop_center", ("pool4", "up_pool5")))
    layers.append(Layer("fuse", "eltwise_sum", ("up_pool5", "pool4_crop")))

    heads = []
    for head, ch, act in HEADS[mode]:
        score = f"score_{head}"
        layers.append(Layer(score, "conv", ("fuse",), ConvSpec(1, 1, 0, 0, 1, c_in, ch)))
        layers.append(Layer(f"upscore_{head}", "upscore", (score, "input")))
        heads.append((head, f"upscore_{head}", act))
    return NetworkGraph(mode, m, layers, tuple(heads), relu_1x1)


def check_input_size(h, w):
    if h < MIN_INPUT or w < MIN_INPUT:
        raise ShapeError(
            f"input {h}x{w} is too small: each side must be at least {MIN_INPUT} px "
            f"to survive five 2x2 poolings"
        )


def infer_shapes(graph, h, w):
    """Symbolic shape pass: layer name -> (C, H, W), without computing anything."""
    check_input_size(h, w)
    shapes = {}
    for lay in graph.layers:
        if lay.kind == "input":
            shapes[lay.name] = (3, h, w)
            continue
        src = shapes[lay.inputs[0]]
        if lay.kind == "conv":
            if src[0] != lay.conv.in_channels:
                raise ShapeError(f"{lay.name}: input channels {src[0]} != {lay.conv.in_channels}")
            shapes[lay.name] = (lay.conv.out_channels, *lay.conv.out_size(src[1], src[2]))
        elif lay.kind == "relu":
            shapes[lay.name] = src
        elif lay.kind == "maxpool2":
            if src[1] < 2 or src[2] < 2:
                raise ShapeError(f"{lay.name}: maxpool2 input {src[1]}x{src[2]} below 2x2")
            shapes[lay.name] = (src[0], src[1] // 2, src[2] // 2)
        elif lay.kind == "eltwise_sum":
            for other in lay.inputs[1:]:
                if shapes[other] != src:
                    raise ShapeError(f"{lay.name}: {other} shape {shapes[other]} != {src}")
            shapes[lay.name] = src
        elif lay.kind == "upsample2x":
            shapes[lay.name] = (src[0], 2 * src[1], 2 * src[2])
        elif lay.kind == "crop_center":
            ref = shapes[lay.inputs[1]]
            T.crop_offsets(src[1], src[2], ref[1], ref[2])
            shapes[lay.name] = (src[0], ref[1], ref[2])
        elif lay.kind == "upscore":
            shapes[lay.name] = (src[0], h, w)
        else:  # pragma: no cover
            raise ValueError(f"unknown layer kind {lay.kind}")
    return shapes


def _upscore_offset(graph, shapes):
    """Cell offset of the fused map relative to Pool-4 (from the centre crop)."""
    crop = graph.layer("pool4_crop")
    src, ref = shapes[crop.inputs[0]], shapes[crop.inputs[1]]
    return T.crop_offsets(src[1], src[2], ref[1], ref[2])


# ---------------------------------------------------------------- weights

class WeightStore(dict):
    """Parameter tensors keyed ``<layer>.weight`` / ``<layer>.bias``."""

    def copy(self):
        return WeightStore({k: v.copy() for k, v in self.items()})


def init_weights(graph, seed=0, scheme="gaussian", std=0.01):
    """Gaussian initialisation; biases start at zero.

    ``scheme="gaussian"`` draws every weight from N(0, std).  ``scheme="he"``
    uses std = sqrt(2 / fan_in) per layer.  Values are rounded to float32 so
    that stores survive a save/load round trip bit-exactly.
    """
    if scheme not in ("gaussian", "he"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    store = WeightStore()
    for lay in graph.conv_layers():
        spec = lay.conv
        if scheme == "he":
            s = np.sqrt(2.0 / (spec.in_channels * spec.kernel_h * spec.kernel_w))
        else:
            s = std
        w = rng.normal(0.0, s, size=spec.weight_shape)
        store[f"{lay.name}.weight"] = w.astype(np.float32).astype(np.float64)
        store[f"{lay.name}.bias"] = np.zeros(spec.out_channels)
    return store


def check_weights(graph, store):
    for lay in graph.conv_layers():
        for key, shape in ((f"{lay.name}.weight", lay.conv.weight_shape),
                           (f"{lay.name}.bias", (lay.conv.out_channels,))):
            if key not in store:
                raise KeyError(f"weight store lacks {key}")
            if store[key].shape != shape:
                raise ShapeError(f"{key}: stored shape {store[key].shape}, graph expects {shape}")


def graph_for_weights(store, relu_1x1="first"):
    """Rebuild the graph a weight store was trained for (mode and width from its shapes)."""
    if "conv1_1.weight" not in store:
        raise KeyError("weight store lacks conv1_1.weight")
    mode = "fine" if "score_cl.weight" in store else "coarse"
    m = store["conv1_1.weight"].shape[0] / VGG_BLOCKS[0][0]
    graph = build_cctn_graph(mode, m, relu_1x1)
    check_weights(graph, store)
    return graph


def transfer_shared(src, dst):
    """Copy every entry of ``src`` whose name and shape also exist in ``dst``.

    Used to start fine-network training from coarse weights: all layers but
    the score heads carry over unchanged.
    """
    out = dst.copy()
    for k, v in src.items():
        if k in out and out[k].shape == v.shape:
            out[k] = v.copy()
    return out


MAGIC = b"CCTN"
FORMAT_VERSION = 1


def save_weights(store, path):
    """Write the binary weight format (little-endian float32 payloads)."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(store)))
        for name in sorted(store):
            arr = np.asarray(store[name])
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_weights(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a CCTN weight file (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported weight format version {version}")
    pos = 12
    store = WeightStore()
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(data):
                raise ValueError("payload truncated")
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            store[name] = arr.astype(np.float64)
    except (struct.error, UnicodeDecodeError) as exc:
        raise ValueError(f"{path}: corrupt weight file ({exc})") from None
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes after last entry")
    return store


# ---------------------------------------------------------------- forward / backward

def prepare_image(image):
    """Map a (3, H, W) image in [0, 1] to network input (mean 0.5 removed)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = np.repeat(image[None], 3, axis=0)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected a 3xHxW image, got shape {image.shape}")
    return image - 0.5


def run_forward(graph, weights, x):
    """Forward pass keeping every activation; returns ``(acts, cache)``."""
    x = T.as_tensor(x)
    if x.shape[0] != 3:
        raise ShapeError(f"input channels: got {x.shape[0]}, expected 3")
    shapes = infer_shapes(graph, x.shape[1], x.shape[2])
    acts = {}
    cache = {"shapes": shapes, "argmax": {}}
    for lay in graph.layers:
        k = lay.kind
        if k == "input":
            acts[lay.name] = x
            continue
        src = acts[lay.inputs[0]]
        if k == "conv":
            acts[lay.name] = T.conv2d_forward(src, weights[f"{lay.name}.weight"],
                                              weights[f"{lay.name}.bias"], lay.conv)
        elif k == "relu":
            acts[lay.name] = T.relu(src)
        elif k == "maxpool2":
            acts[lay.name], cache["argmax"][lay.name] = T.maxpool2(src)
        elif k == "eltwise_sum":
            acts[lay.name] = T.eltwise_sum([acts[n] for n in lay.inputs])
        elif k == "upsample2x":
            acts[lay.name] = T.upsample2x_bilinear(src)
        elif k == "crop_center":
            ref = shapes[lay.inputs[1]]
            acts[lay.name] = T.crop_center(src, ref[1], ref[2])
        elif k == "upscore":
            oy, ox = _upscore_offset(graph, shapes)
            acts[lay.name] = T.resize_bilinear(src, x.shape[1], x.shape[2], STRIDE, STRIDE, oy, ox)
    return acts, cache


def head_maps(graph, acts):
    """Heat-maps in head order: softmax text probability or sigmoid map."""
    maps = []
    for _, layer_name, act in graph.heads:
        logits = acts[layer_name]
        maps.append(T.softmax2_map(logits) if act == "softmax" else T.sigmoid_map(logits))
    return maps


def forward(graph, weights, image):
    """Run inference on a prepared (3, H, W) input; returns one heat-map per head."""
    acts, _ = run_forward(graph, weights, image)
    return head_maps(graph, acts)


def backward(graph, weights, acts, cache, out_grads, architectural=False):
    """Reverse pass from gradients on named layers.

    ``out_grads`` maps layer names to upstream gradients.  Returns
    ``(param_grads, input_grad)``.  With ``architectural=True`` ReLUs pass
    every gradient and max-pools spread it over their whole window.
    """
    shapes = cache["shapes"]
    grads = {k: np.array(v, dtype=np.float64) for k, v in out_grads.items()}
    pgrads = {}

    def accumulate(name, g):
        if name in grads:
            grads[name] = grads[name] + g
        else:
            grads[name] = g

    for lay in reversed(graph.layers):
        g = grads.pop(lay.name, None)
        if g is None or lay.kind == "input":
            if lay.kind == "input" and g is not None:
                grads["input"] = g
            continue
        src_name = lay.inputs[0]
        k = lay.kind
        if k == "conv":
            dx, dw, db = T.conv2d_backward(acts[src_name], weights[f"{lay.name}.weight"], lay.conv, g)
            pgrads[f"{lay.name}.weight"] = dw
            pgrads[f"{lay.name}.bias"] = db
            accumulate(src_name, dx)
        elif k == "relu":
            accumulate(src_name, g if architectural else T.relu_backward(acts[src_name], g))
        elif k == "maxpool2":
            accumulate(src_name, T.maxpool2_backward(g, cache["argmax"][lay.name],
                                                     shapes[src_name], distribute=architectural))
        elif k == "eltwise_sum":
            for n in lay.inputs:
                accumulate(n, g)
        elif k == "upsample2x":
            accumulate(src_name, T.upsample2x_bilinear_backward(g, shapes[src_name]))
        elif k == "crop_center":
            accumulate(src_name, T.crop_center_backward(g, shapes[src_name]))
        elif k == "upscore":
            oy, ox = _upscore_offset(graph, shapes)
            accumulate(src_name, T.resize_bilinear_backward(g, shapes[src_name], STRIDE, STRIDE, oy, ox))
    return pgrads, grads.get("input")


def loss_and_grads(graph, weights, x, targets, cl_weight=1.0, class_weights=None):
    """Joint loss for one sample; returns ``(loss, param_grads)``."""
    acts, cache = run_forward(graph, weights, x)
    targets = _as_targets(graph, targets)
    total = 0.0
    out_grads = {}
    for (head, layer_name, act), target in zip(graph.heads, targets):
        if act == "softmax":
            loss, g = T.softmax_xent_loss(acts[layer_name], target, class_weights)
        else:
            loss, g = T.bce_loss(acts[layer_name], target)
            loss, g = cl_weight * loss, cl_weight * g
        total += loss
        out_grads[layer_name] = g
    pgrads, _ = backward(graph, weights, acts, cache, out_grads)
    return total, pgrads


def _as_targets(graph, targets):
    if isinstance(targets, np.ndarray) and targets.ndim == 2:
        targets = (targets,)
    targets = tuple(targets)
    if len(targets) != len(graph.heads):
        raise ValueError(
            f"{graph.mode} network has {len(graph.heads)} head(s) "
            f"({', '.join(h[0] for h in graph.heads)}) but {len(targets)} target map(s) were given"
        )
    return targets


# ---------------------------------------------------------------- training

@dataclass
class TrainParams:
    lr: float = 1e-3
    momentum: float = 0.9
    iterations: int = 1000
    batch_size: int = 1
    shuffle: bool = False
    seed: int = 0
    cl_weight: float = 1.0
    class_weights: tuple | None = None
    clip_norm: float = 0.0  # rescale the batch gradient to at most this global L2 norm (0 = off)
    lr_policy: str = "fixed"  # or "poly": lr * (1 - it / iterations) ** lr_power
    lr_power: float = 1.0
    log_every: int = 0


def learning_rate(params, it):
    if params.lr_policy == "fixed":
        return params.lr
    if params.lr_policy == "poly":
        return params.lr * (1.0 - it / params.iterations) ** params.lr_power
    raise ValueError(f"unknown lr_policy {params.lr_policy!r}")


def train(graph, weights, dataset, params, progress=None):
    """Mini-batch SGD with momentum over ``dataset`` of ``(input, targets)`` pairs.

    Samples are visited cyclically (optionally reshuffled each epoch with
    ``params.seed``).  Returns ``(weights, loss_curve)`` where the curve holds
    the mean batch loss of every iteration.
    """
    check_weights(graph, weights)
    if not len(dataset):
        raise ValueError("training dataset is empty")
    learning_rate(params, 0)
    for _, targets in dataset[:1]:
        _as_targets(graph, targets)
    rng = np.random.default_rng(params.seed)
    order = np.arange(len(dataset))
    pos = len(dataset)
    params_w = dict(weights)
    state = {}
    curve = []
    t0 = time.perf_counter()
    for it in range(params.iterations):
        batch_loss = 0.0
        acc = {}
        for _ in range(params.batch_size):
            if pos >= len(order):
                if params.shuffle:
                    order = rng.permutation(len(dataset))
                pos = 0
            x, targets = dataset[order[pos]]
            pos += 1
            loss, g = loss_and_grads(graph, params_w, x, targets, params.cl_weight, params.class_weights)
            batch_loss += loss
            for k, v in g.items():
                acc[k] = acc[k] + v if k in acc else v
        if params.batch_size > 1:
            acc = {k: v / params.batch_size for k, v in acc.items()}
        curve.append(batch_loss / params.batch_size)
        if params.clip_norm > 0:
            norm = np.sqrt(sum(float(np.sum(v * v)) for v in acc.values()))
            if norm > params.clip_norm:
                acc = {k: v * (params.clip_norm / norm) for k, v in acc.items()}
        params_w, state = T.sgd_momentum_step(params_w, acc, state, learning_rate(params, it), params.momentum)
        if progress is not None and params.log_every and (it + 1) % params.log_every == 0:
            progress(it + 1, float(np.mean(curve[-params.log_every:])), time.perf_counter() - t0)
    return WeightStore(params_w), curve


# ---------------------------------------------------------------- config file

@dataclass
class GraphConfig:
    """Key/value network and training configuration."""

    mode: str = "coarse"
    width_multiplier: float = 1.0
    seed: int = 0
    relu_1x1: str = "first"
    init: str = "gaussian"
    init_std: float = 0.01
    input_size: int = 500
    lr: float = 1e-10
    momentum: float = 0.99
    batch_size: int = 1
    iterations: int = 200000
    cl_weight: float = 1.0
    class_weights: str = "none"
    clip_norm: float = 0.0
    lr_policy: str = "fixed"
    lr_power: float = 1.0
    augment: bool = True
    patch_mode: str = "crop"
    fine_region_aspect: float = 0.0  # skip fine training groups longer than this ratio (0 = keep all)
    extra: dict = field(default_factory=dict)

    def build(self, mode=None):
        return build_cctn_graph(mode or self.mode, self.width_multiplier, self.relu_1x1)

    def train_params(self, iterations=None, seed=None):
        cw = None
        if self.class_weights not in ("none", "", None):
            cw = tuple(float(v) for v in str(self.class_weights).split(","))
        return TrainParams(lr=self.lr, momentum=self.momentum,
                           iterations=self.iterations if iterations is None else iterations,
                           batch_size=self.batch_size, seed=self.seed if seed is None else seed,
                           cl_weight=self.cl_weight, class_weights=cw,
                           clip_norm=self.clip_norm, lr_policy=self.lr_policy,
                           lr_power=self.lr_power)


PRESETS = {
    "paper": GraphConfig(),
    "toy": GraphConfig(width_multiplier=0.125, init="he", input_size=160, lr=1e-2, momentum=0.9,
                       clip_norm=1.0, iterations=3000, augment=False, patch_mode="resize"),
}


def _parse_value(kind, raw):
    if kind is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind is float:
        return float(Fraction(raw))
    if kind is int:
        return int(raw)
    return raw


def parse_config(text):
    cfg = GraphConfig()
    kinds = {f.name: f.type for f in fields(GraphConfig)}
    casts = {"str": str, "float": float, "int": int, "bool": bool}
    updates, extra = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key == "preset":
            if raw not in PRESETS:
                raise ValueError(f"config line {lineno}: unknown preset {raw!r}")
            cfg = replace(PRESETS[raw], extra={})
            continue
        if key in kinds and key != "extra":
            kind = casts.get(kinds[key] if isinstance(kinds[key], str) else kinds[key].__name__, str)
            try:
                updates[key] = _parse_value(kind, raw)
            except (ValueError, ZeroDivisionError) as exc:
                raise ValueError(f"config line {lineno}: bad value for {key}: {exc}") from None
        else:
            extra[key] = raw
    cfg = replace(cfg, **updates, extra=extra)
    build_cctn_graph(cfg.mode, cfg.width_multiplier, cfg.relu_1x1)  # validate
    return cfg


def load_config(path):
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read())


def dump_config(cfg):
    lines = []
    for f in fields(GraphConfig):
        if f.name == "extra":
            continue
        lines.append(f"{f.name} = {getattr(cfg, f.name)}")
    lines.extend(f"{k} = {v}" for k, v in cfg.extra.items())
    return "\n".join(lines) + "\n"
