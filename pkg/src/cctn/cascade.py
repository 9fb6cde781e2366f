"""Coarse-to-fine detection pipeline.

The coarse network runs on two rescaled copies of the image.  Components of
its heat-map are either emitted directly as text lines or cropped, rescaled
and passed to the fine network, whose maps yield oriented text lines.  All
boxes are mapped back to the original image and merged.
"""
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import network as N
from .geometry import (Detection, FinalLine, OrientedBox, binarize, clip_box,
                       coarse_decide, connected_components, fine_extract, merge_scales)
from .supervision import crop_fine_region, resize_image

SCALES = ("square", "long_side")
STAGES = ("resize", "coarse", "decide", "fine", "merge")


@dataclass
class PipelineConfig:
    coarse_weights: str = ""
    fine_weights: str = ""
    coarse_threshold: float = 0.3
    fine_threshold: float = 0.5
    area_ratio_thr: float = 0.7
    borderline_thr: float = 5.0
    scales: tuple = SCALES
    working_size: int = 500  # side of the square scale, long side of the other
    fine_size: int = 500
    fine_pad: int = 50
    enlarge: float = 1.2
    min_component: int = 20  # smaller components are noise
    merge_iou: float = 0.5
    relu_1x1: str = "first"
    coarse_only: bool = False
    keep_heatmaps: bool = False

    def __post_init__(self):
        for name in ("coarse_threshold", "fine_threshold"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if not (self.area_ratio_thr > 0 and self.borderline_thr > 0 and self.enlarge > 0):
            raise ValueError("ratio thresholds and enlargement must be positive")
        bad = [s for s in self.scales if s not in SCALES]
        if bad or not self.scales:
            raise ValueError(f"scales must be drawn from {SCALES}, got {self.scales}")
        if self.working_size < N.MIN_INPUT or self.fine_size < N.MIN_INPUT:
            raise ValueError(f"working sizes must be at least {N.MIN_INPUT}")
        if not 0 <= 2 * self.fine_pad < self.fine_size:
            raise ValueError("fine padding leaves no room for the region")


@dataclass
class Models:
    coarse_graph: object
    coarse: dict
    fine_graph: object = None
    fine: dict = None


@dataclass
class DetectionResult:
    detections: list
    timing: dict = field(default_factory=dict)
    heatmaps: dict = field(default_factory=dict)
    regions: list = field(default_factory=list)  # coarse regions sent to the fine stage


def load_models(config):
    if not config.coarse_weights:
        raise ValueError("no coarse weights given")
    coarse = N.load_weights(config.coarse_weights)
    cg = N.graph_for_weights(coarse, config.relu_1x1)
    if cg.mode != "coarse":
        raise ValueError(f"{config.coarse_weights} holds {cg.mode} weights, expected coarse")
    if config.coarse_only:
        return Models(cg, coarse)
    if not config.fine_weights:
        raise ValueError("no fine weights given (use coarse-only mode to skip the fine stage)")
    fine = N.load_weights(config.fine_weights)
    fg = N.graph_for_weights(fine, config.relu_1x1)
    if fg.mode != "fine":
        raise ValueError(f"{config.fine_weights} holds {fg.mode} weights, expected fine")
    return Models(cg, coarse, fg, fine)


def scale_shape(h, w, scale, size):
    if scale == "square":
        return size, size
    s = size / max(h, w)
    return max(N.MIN_INPUT, int(round(h * s))), max(N.MIN_INPUT, int(round(w * s)))


def clip_to_rect(box, x1, y1, x2, y2):
    """Clip a box to an axis-aligned window; None if nothing is left."""
    moved = OrientedBox(box.cx - x1, box.cy - y1, box.w, box.h, box.angle)
    out = clip_box(moved, x2 - x1, y2 - y1)
    if out is None:
        return None
    return OrientedBox(out.cx + x1, out.cy + y1, out.w, out.h, out.angle)


def _coarse_pass(image, scale, models, config, timing, heatmaps):
    h, w = image.shape[1:]
    t0 = time.perf_counter()
    oh, ow = scale_shape(h, w, scale, config.working_size)
    resized, tr = resize_image(image, oh, ow)
    t1 = time.perf_counter()
    (heat,) = N.forward(models.coarse_graph, models.coarse, N.prepare_image(resized))
    t2 = time.perf_counter()
    timing["resize"] += t1 - t0
    timing["coarse"] += t2 - t1
    if config.keep_heatmaps:
        heatmaps[f"coarse_{scale}"] = heat
    comps = connected_components(binarize(heat, config.coarse_threshold), config.min_component)
    frame = tr.inverse()
    decisions = []
    for comp in comps:
        score = float(heat[comp.rows, comp.cols].mean())
        if config.coarse_only:
            decisions.append((FinalLine(frame.map_box(comp.bbox()).axis_aligned()), score))
        else:
            decisions.append((coarse_decide(comp, frame, config.area_ratio_thr,
                                            config.borderline_thr, config.enlarge), score))
    timing["decide"] += time.perf_counter() - t2
    return decisions


def refine_region(image, region, models, config):
    """Fine stage on one coarse region; detections in original coordinates."""
    box = region.box()
    patch, _, tr = crop_fine_region(image, None, box, config.fine_size, config.fine_pad)
    tl, cl = N.forward(models.fine_graph, models.fine, N.prepare_image(patch))
    dets = fine_extract(cl, tl, config.fine_threshold, transform=tr.inverse(),
                        min_pixels=config.min_component)
    x1, y1, x2, y2 = box.aabb()
    out = []
    for d in dets:
        b = clip_to_rect(d.box, x1, y1, x2, y2)
        if b is not None:
            out.append(Detection(b, d.score))
    return out, (tl, cl)


def detect(image, config, models=None):
    """Full pipeline on a (3, H, W) image in [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a 3xHxW image, got shape {image.shape}")
    models = models or load_models(config)
    h, w = image.shape[1:]
    timing = {s: 0.0 for s in STAGES}
    heatmaps = {}
    dets, regions = [], []
    for scale in config.scales:
        for decision, score in _coarse_pass(image, scale, models, config, timing, heatmaps):
            if isinstance(decision, FinalLine):
                dets.append(Detection(decision.box, score))
            else:
                regions.append(decision)
    t0 = time.perf_counter()
    for i, region in enumerate(regions):
        found, maps = refine_region(image, region, models, config)
        dets.extend(found)
        if config.keep_heatmaps:
            heatmaps[f"fine{i}_tl"], heatmaps[f"fine{i}_cl"] = maps
    t1 = time.perf_counter()
    clipped = []
    for d in dets:
        b = clip_to_rect(d.box, 0, 0, w, h)
        if b is not None:
            clipped.append(Detection(b, d.score))
    merged = merge_scales(clipped, iou_thr=config.merge_iou)
    timing["fine"] += t1 - t0
    timing["merge"] += time.perf_counter() - t1
    return DetectionResult(merged, timing, heatmaps, regions)


def detect_batch(images, config, models=None, threads=0):
    """``detect`` over several images; order preserved, items independent."""
    models = models or load_models(config)
    if threads and threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(lambda im: detect(im, config, models), images))
    return [detect(im, config, models) for im in images]


def report_timing(result):
    lines = ["stage seconds"]
    for stage in STAGES:
        lines.append(f"{stage} {result.timing.get(stage, 0.0):.4f}")
    lines.append(f"total {sum(result.timing.values()):.4f}")
    return "\n".join(lines) + "\n"
