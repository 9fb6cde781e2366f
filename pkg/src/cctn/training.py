"""Datasets on disk and sample preparation for the two training stages."""
import os

import numpy as np

from . import network as N
from .geometry import Region
from .pnm import read_image, write_image
from .supervision import (Annotation, augment, central_line_mask, crop_fine_region, format_annotation,
                          parse_annotation, region_mask, resize_image, sample_training_patch,
                          text_line_mask, transform_annotation)

IMAGE_EXTS = (".ppm", ".pgm", ".pnm")


def save_scene(root, image_id, image, ann):
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "gt"), exist_ok=True)
    write_image(os.path.join(root, "images", image_id + ".ppm"), image)
    ann = Annotation(image_id, ann.boxes, ann.width, ann.height)
    with open(os.path.join(root, "gt", image_id + ".txt"), "w", encoding="utf-8") as f:
        f.write(format_annotation(ann))


def list_images(directory):
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(IMAGE_EXTS))
    return [(os.path.splitext(n)[0], os.path.join(directory, n)) for n in names]


def load_dataset(root):
    """``[(image_id, image, annotation)]`` from ``root/images`` and ``root/gt``."""
    img_dir, gt_dir = os.path.join(root, "images"), os.path.join(root, "gt")
    if not os.path.isdir(img_dir) or not os.path.isdir(gt_dir):
        raise ValueError(f"{root}: dataset needs images/ and gt/ subdirectories")
    out = []
    for image_id, path in list_images(img_dir):
        image = read_image(path)
        gt_path = os.path.join(gt_dir, image_id + ".txt")
        if not os.path.exists(gt_path):
            raise ValueError(f"{path}: no annotation file {gt_path}")
        with open(gt_path, encoding="utf-8") as f:
            ann = parse_annotation(f.read(), image_id, image.shape[2], image.shape[1])
        out.append((image_id, image, ann))
    if not out:
        raise ValueError(f"{img_dir}: no P5/P6 images found")
    return out


def group_lines(boxes, join=0.6):
    """Group boxes whose bounds come within ``join`` x the smaller line height."""
    n = len(boxes)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            a, b = boxes[i].aabb(), boxes[j].aabb()
            g = join * min(boxes[i].h, boxes[j].h)
            if a[0] - g <= b[2] and b[0] - g <= a[2] and a[1] - g <= b[3] and b[1] - g <= a[3]:
                parent[find(i)] = find(j)
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(boxes[i])
    return [groups[k] for k in sorted(groups)]


def fine_regions(ann, rng=None, enlarge=1.2, jitter=0.1, join=0.6, max_aspect=0.0):
    """Square regions around groups of nearby lines, as the coarse stage would propose.

    With ``max_aspect`` > 0, groups whose bounding box is more elongated than
    that are skipped: the coarse decision rule emits such lines directly, so
    the fine network never sees them.
    """
    regions = []
    for group in group_lines(ann.boxes, join):
        x1 = min(b.aabb()[0] for b in group)
        y1 = min(b.aabb()[1] for b in group)
        x2 = max(b.aabb()[2] for b in group)
        y2 = max(b.aabb()[3] for b in group)
        long_side, short_side = max(x2 - x1, y2 - y1), min(x2 - x1, y2 - y1)
        if max_aspect > 0 and long_side > max_aspect * short_side:
            continue
        side = enlarge * max(x2 - x1, y2 - y1)
        cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
        if rng is not None and jitter > 0:
            cx += rng.uniform(-jitter, jitter) * side
            cy += rng.uniform(-jitter, jitter) * side
            side *= 1 + rng.uniform(-jitter, jitter)
        regions.append(Region(cx, cy, side))
    return regions


def fine_pad(size):
    return int(round(size / 10))


def _maybe_augment(patch, ann, cfg, rng):
    if cfg.augment:
        return augment(patch, ann, rng)
    return patch, ann


def coarse_samples(scenes, cfg, rng):
    """``(input, region mask)`` pairs at the configured working size."""
    size = cfg.input_size
    out = []
    for _, image, ann in scenes:
        if cfg.patch_mode == "resize":
            patch, tr = resize_image(image, size, size)
            pann = transform_annotation(ann, tr, size, size)
        elif cfg.patch_mode == "crop":
            patch, pann = sample_training_patch(image, ann, rng, size)
        else:
            raise ValueError(f"unknown patch_mode {cfg.patch_mode!r}")
        patch, pann = _maybe_augment(patch, pann, cfg, rng)
        out.append((N.prepare_image(patch), region_mask(pann, (size, size))))
    return out


def fine_samples(scenes, cfg, rng, jitter=0.1):
    """``(input, (text-line mask, central-line mask))`` pairs from line-group regions."""
    size = cfg.input_size
    pad = fine_pad(size)
    out = []
    for _, image, ann in scenes:
        for region in fine_regions(ann, rng, jitter=jitter, max_aspect=cfg.fine_region_aspect):
            patch, pann, _ = crop_fine_region(image, ann, region.box(), size, pad)
            patch, pann = _maybe_augment(patch, pann, cfg, rng)
            out.append((N.prepare_image(patch),
                        (text_line_mask(pann, (size, size)), central_line_mask(pann, (size, size)))))
    return out


def train_stage(cfg, stage, scenes, init=None, iterations=None, seed=None, progress=None):
    """Build samples for ``stage`` and train; returns ``(weights, loss curve)``.

    ``init`` seeds the weights: the whole store for the same stage, or the
    shared layers when a coarse store starts fine training.
    """
    seed = cfg.seed if seed is None else seed
    graph = cfg.build(stage)
    rng = np.random.default_rng(seed)
    samples = coarse_samples(scenes, cfg, rng) if stage == "coarse" else fine_samples(scenes, cfg, rng)
    if not samples:
        raise ValueError("no training samples could be built from the data")
    weights = N.init_weights(graph, seed, cfg.init, cfg.init_std)
    if init is not None:
        weights = N.transfer_shared(init, weights)
    params = cfg.train_params(iterations, seed)
    if progress is not None and not params.log_every:
        params.log_every = max(1, params.iterations // 20)
    return N.train(graph, weights, samples, params, progress)
