"""Ground-truth masks, training patches and synthetic scenes."""
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from cctn.geometry import Affine, OrientedBox, clip_polygon, polygon_area

# rescaled truncated Gaussian: 1 on the axis, 0 at radius H/4
_E2 = math.exp(-2.0)


@dataclass
class Annotation:
    image_id: str
    boxes: list
    width: int
    height: int

    @property
    def shape(self):
        return (self.height, self.width)


# ---------------------------------------------------------------- annotation files

def parse_annotation(text, image_id="", width=0, height=0):
    """Read ``x1,y1,x2,y2`` or ``cx,cy,w,h,theta`` lines; ``#`` starts a comment.

    The number of leading numeric fields decides the form (5 or more:
    oriented, 4: axis-aligned); anything after them is a transcript and is
    ignored.
    """
    boxes = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip().lstrip("﻿")
        if not line or line.startswith("#"):
            continue
        nums = []
        for part in line.split(","):
            try:
                nums.append(float(part.strip()))
            except ValueError:
                break
            if len(nums) == 5:
                break
        if len(nums) == 5:
            box = OrientedBox(*nums)
        elif len(nums) == 4:
            box = OrientedBox.from_xyxy(*nums)
        else:
            raise ValueError(f"annotation line {lineno}: expected 4 or 5 numeric fields in {line!r}")
        if not (box.w > 0 and box.h > 0):
            raise ValueError(f"annotation line {lineno}: box has non-positive size")
        boxes.append(box.normalized())
    return Annotation(image_id, boxes, width, height)


def format_annotation(ann):
    lines = [f"# {ann.image_id} {ann.width}x{ann.height}"]
    for b in ann.boxes:
        if b.angle == 0.0:
            x1, y1, x2, y2 = b.aabb()
            lines.append(f"{x1:.4f},{y1:.4f},{x2:.4f},{y2:.4f}")
        else:
            lines.append(f"{b.cx:.4f},{b.cy:.4f},{b.w:.4f},{b.h:.4f},{b.angle:.8f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- masks

def region_mask(annotation, shape=None):
    """1 where a pixel centre lies inside any ground-truth box."""
    shape = annotation.shape if shape is None else shape
    mask = np.zeros(shape, dtype=bool)
    for b in annotation.boxes:
        mask |= b.pixel_mask(shape)
    return mask.astype(np.float64)


def text_line_mask(annotation, shape=None):
    return region_mask(annotation, shape)


def central_line_value(d, height):
    """Soft central-line target at perpendicular distance ``d`` from the axis."""
    sigma = 0.125 * height
    d = np.asarray(d, dtype=np.float64)
    v = (np.exp(-d * d / (2 * sigma * sigma)) - _E2) / (1 - _E2)
    return np.where(np.abs(d) < 0.25 * height, np.clip(v, 0.0, 1.0), 0.0)


def central_line_mask(annotation, shape=None):
    """Soft band around each box's long axis; overlaps take the maximum."""
    shape = annotation.shape if shape is None else shape
    out = np.zeros(shape, dtype=np.float64)
    for b in annotation.boxes:
        inside = b.pixel_mask(shape)
        if not inside.any():
            continue
        rows, cols = np.nonzero(inside)
        u, v = b.axes
        dx, dy = cols + 0.5 - b.cx, rows + 0.5 - b.cy
        d = dx * v[0] + dy * v[1]
        if b.h < 2:
            val = ((d > -0.5) & (d <= 0.5)).astype(np.float64)  # exactly one row
        else:
            val = central_line_value(d, b.h)
        out[rows, cols] = np.maximum(out[rows, cols], val)
    return out


# ---------------------------------------------------------------- resampling

def warp_image(image, transform, out_h, out_w, cval=0.0):
    """Resample a (C, H, W) image through ``transform`` (source -> output coords).

    Bilinear; samples falling outside the source take ``cval``.
    """
    image = np.asarray(image, dtype=np.float64)
    inv = transform.inverse()
    yy, xx = np.mgrid[0:out_h, 0:out_w]
    pts = np.column_stack([xx.ravel() + 0.5, yy.ravel() + 0.5])
    src = inv.apply(pts) - 0.5
    coords = [src[:, 1], src[:, 0]]
    out = np.empty((image.shape[0], out_h, out_w))
    for c in range(image.shape[0]):
        out[c] = ndimage.map_coordinates(image[c], coords, order=1, mode="constant",
                                         cval=cval).reshape(out_h, out_w)
    return out


def resize_image(image, out_h, out_w):
    """Bilinear resize of a (C, H, W) image; returns ``(image, transform)``."""
    h, w = image.shape[1:]
    tr = Affine.scale(out_w / w, out_h / h)
    if (out_h, out_w) == (h, w):
        return np.array(image, dtype=np.float64), tr
    if out_h < h or out_w < w:
        # light prefilter against aliasing when shrinking
        sig = (max(0.0, 0.5 * (h / out_h - 1)), max(0.0, 0.5 * (w / out_w - 1)))
        image = np.stack([ndimage.gaussian_filter(ch, sig, mode="nearest") for ch in image])
    return warp_image(image, tr, out_h, out_w, cval=0.0), tr


def transform_annotation(ann, transform, width, height, window=None, min_keep=0.25, image_id=None):
    """Map boxes into a new frame, clip them to ``window`` and drop small remnants.

    ``window`` is ``(x1, y1, x2, y2)`` in the new frame (default: the whole
    frame).  Boxes keeping less than ``min_keep`` of their mapped area are
    dropped.
    """
    x1, y1, x2, y2 = window if window is not None else (0, 0, width, height)
    kept = []
    for b in ann.boxes:
        mb = transform.map_box(b)
        poly = clip_polygon(mb.corners(), x1, y1, x2, y2)
        area = polygon_area(poly)
        if mb.area <= 0 or area < min_keep * mb.area:
            continue
        if area < mb.area * (1 - 1e-9):
            u, v = mb.axes
            c = np.array([mb.cx, mb.cy])
            pu, pv = (poly - c) @ u, (poly - c) @ v
            nc = c + u * (pu.min() + pu.max()) / 2 + v * (pv.min() + pv.max()) / 2
            mb = OrientedBox(nc[0], nc[1], pu.max() - pu.min(), pv.max() - pv.min(), mb.angle).normalized()
        kept.append(mb)
    return Annotation(ann.image_id if image_id is None else image_id, kept, width, height)


# ---------------------------------------------------------------- training patches

def sample_training_patch(image, annotation, rng, size=500, min_keep=0.25):
    """Random ``size`` x ``size`` crop; images smaller than that are zero-padded."""
    c, h, w = image.shape
    x0 = int(rng.integers(0, max(0, w - size) + 1))
    y0 = int(rng.integers(0, max(0, h - size) + 1))
    patch = np.zeros((c, size, size))
    sub = image[:, y0:y0 + size, x0:x0 + size]
    patch[:, :sub.shape[1], :sub.shape[2]] = sub
    tr = Affine([[1, 0, -x0], [0, 1, -y0]])
    ann = transform_annotation(annotation, tr, size, size, min_keep=min_keep)
    return patch, ann


@dataclass(frozen=True)
class AugmentParams:
    angle: float = 0.0
    flip: bool = False
    noise_sigma: float = 0.0
    noise_seed: int = 0


def draw_augmentation(rng, max_angle=math.radians(15), flip_p=0.5, noise_sigma=0.02):
    return AugmentParams(
        angle=float(rng.uniform(-max_angle, max_angle)),
        flip=bool(rng.random() < flip_p),
        noise_sigma=noise_sigma,
        noise_seed=int(rng.integers(0, 2**31)),
    )


def apply_augmentation(patch, annotation, params):
    c, h, w = patch.shape
    tr = Affine.identity()
    if params.angle:
        tr = Affine.similarity(1.0, params.angle, (w / 2, h / 2), (w / 2, h / 2))
    if params.flip:
        tr = Affine([[-1, 0, w], [0, 1, 0]]) @ tr
    out = patch if tr.m.tolist() == Affine.identity().m.tolist() else warp_image(patch, tr, h, w)
    ann = transform_annotation(annotation, tr, w, h) if out is not patch else annotation
    if params.noise_sigma > 0:
        noise = np.random.default_rng(params.noise_seed).normal(0.0, params.noise_sigma, out.shape)
        out = np.clip(out + noise, 0.0, 1.0)
    return (np.array(out) if out is patch else out), ann


def augment(patch, annotation, rng, max_angle=math.radians(15), flip_p=0.5, noise_sigma=0.02):
    """Random rotation, horizontal flip and additive Gaussian noise."""
    params = draw_augmentation(rng, max_angle, flip_p, noise_sigma)
    return apply_augmentation(patch, annotation, params)


# ---------------------------------------------------------------- fine regions

def region_transform(region, size=500, pad=50):
    """Map from original coordinates into a ``size`` square fine patch.

    The region's content fills the central ``size - 2*pad`` square.
    """
    inner = size - 2 * pad
    if inner <= 0:
        raise ValueError(f"padding {pad} leaves no content in a {size} patch")
    c, s = math.cos(region.angle), math.sin(region.angle)
    sx, sy = inner / region.w, inner / region.h
    a = np.diag([sx, sy]) @ np.array([[c, s], [-s, c]])
    t = np.array([size / 2, size / 2]) - a @ np.array([region.cx, region.cy])
    return Affine(np.column_stack([a, t]))


def crop_fine_region(image, annotation, region, size=500, pad=50, min_keep=0.25):
    """Resample ``region`` to the central square of a zero-padded patch.

    Returns ``(patch, annotation, transform)``; the transform maps original
    coordinates to patch coordinates.
    """
    tr = region_transform(region, size, pad)
    patch = warp_image(image, tr, size, size, cval=0.0)
    # outside the content square stays exactly zero
    patch[:, :pad, :] = 0
    patch[:, size - pad:, :] = 0
    patch[:, :, :pad] = 0
    patch[:, :, size - pad:] = 0
    ann = None
    if annotation is not None:
        ann = transform_annotation(annotation, tr, size, size, window=(pad, pad, size - pad, size - pad),
                                   min_keep=min_keep)
    return patch, ann, tr


# ---------------------------------------------------------------- synthetic scenes

GLYPH_W, GLYPH_H = 3, 5


@dataclass
class SceneSpec:
    size: tuple = (256, 256)
    min_lines: int = 1
    max_lines: int = 6
    line_height: tuple = (12.0, 22.0)
    paragraph_p: float = 0.5
    max_angle: float = 0.0
    distractors: int = 4
    margin: float = 2.0
    max_length: float = 0.9
    extra: dict = field(default_factory=dict)


def _glyph_bank(rng, n=40):
    bank = rng.random((n, GLYPH_H, GLYPH_W)) < 0.55
    bank[:, :, 1] |= rng.random((n, GLYPH_H)) < 0.3
    # every glyph needs a stroke in most rows
    empty = bank.sum(axis=2) == 0
    bank[empty, 1] = True
    return bank


def _render_line(canvas, box, ink, rng, bank):
    """Draw glyph strokes inside an oriented box."""
    h, w = canvas.shape[1:]
    x1, y1, x2, y2 = box.aabb()
    c0, c1 = max(0, int(x1)), min(w, int(math.ceil(x2)))
    r0, r1 = max(0, int(y1)), min(h, int(math.ceil(y2)))
    if c0 >= c1 or r0 >= r1:
        return
    yy, xx = np.mgrid[r0:r1, c0:c1] + 0.5
    u, v = box.axes
    du = (xx - box.cx) * u[0] + (yy - box.cy) * u[1] + box.w / 2
    dv = (yy - box.cy) * v[1] + (xx - box.cx) * v[0] + box.h / 2
    inside = (du >= 0) & (du < box.w) & (dv >= 0) & (dv < box.h)
    # glyph cells: margin of 10% top/bottom, cell width ~0.6 of height
    margin = 0.1 * box.h
    gh = box.h - 2 * margin
    cell_w = 0.65 * box.h
    n_cells = max(1, int(box.w // cell_w))
    cell_w = box.w / n_cells
    gid = rng.integers(0, len(bank), n_cells)
    k = np.clip((du // cell_w).astype(int), 0, n_cells - 1)
    fu = (du - k * cell_w) / cell_w  # position in cell
    gx = np.floor((fu - 0.1) / 0.8 * GLYPH_W).astype(int)
    gy = np.floor((dv - margin) / gh * GLYPH_H).astype(int)
    ok = inside & (gx >= 0) & (gx < GLYPH_W) & (gy >= 0) & (gy < GLYPH_H)
    stroke = np.zeros_like(ok)
    sel = np.nonzero(ok)
    stroke[sel] = bank[gid[k[sel]], gy[sel], gx[sel]]
    region = canvas[:, r0:r1, c0:c1]
    for ch in range(canvas.shape[0]):
        region[ch][stroke] = ink[ch]


def _background(rng, h, w, difficulty):
    base = rng.uniform(0.25, 0.75, size=3)
    low = ndimage.gaussian_filter(rng.standard_normal((h // 8 + 2, w // 8 + 2)), 1.0)
    low = ndimage.zoom(low, 8, order=1)[:h, :w]
    low = low / (np.abs(low).max() + 1e-9)
    tint = rng.uniform(-1, 1, 3)
    img = base[:, None, None] + (0.08 + 0.12 * difficulty) * tint[:, None, None] * low[None]
    fine = rng.standard_normal((h, w)) * (0.01 + 0.03 * difficulty)
    return img + fine[None]


def _draw_distractor(canvas, rng):
    h, w = canvas.shape[1:]
    color = rng.uniform(0, 1, 3)
    kind = rng.integers(0, 3)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    cx, cy = rng.uniform(0, w), rng.uniform(0, h)
    r = rng.uniform(0.04, 0.15) * min(h, w)
    if kind == 0:
        m = (xx - cx) ** 2 + (yy - cy) ** 2 < r * r
    elif kind == 1:
        m = np.abs(np.hypot(xx - cx, yy - cy) - r) < rng.uniform(1.0, 3.0)
    else:
        a = rng.uniform(0, math.pi)
        d = np.abs((xx - cx) * math.sin(a) - (yy - cy) * math.cos(a))
        m = (d < rng.uniform(1.0, 2.5)) & (np.hypot(xx - cx, yy - cy) < 2.5 * r)
    for ch in range(3):
        canvas[ch][m] = color[ch]


def _fits(box, placed, h, w, gap, margin):
    x1, y1, x2, y2 = box.aabb()
    if x1 < margin or y1 < margin or x2 > w - margin or y2 > h - margin:
        return False
    for other in placed:
        a1, b1, a2, b2 = other.aabb()
        if not (x2 + gap <= a1 or a2 + gap <= x1 or y2 + gap <= b1 or b2 + gap <= y1):
            return False
    return True


def generate_synthetic_scene(rng, difficulty=0.5, spec=None):
    """Render a textured scene with text-like bars; returns ``(image, annotation)``.

    Bars are filled with random glyph strokes.  Some lines come in tight
    paragraphs (parallel lines separated by a small gap), which merge at
    coarse resolution.  ``difficulty`` in [0, 1] raises clutter and lowers
    contrast.
    """
    spec = spec or SceneSpec()
    h, w = spec.size
    bank = _glyph_bank(rng)
    img = _background(rng, h, w, difficulty)
    for _ in range(int(round(spec.distractors * (0.5 + difficulty)))):
        _draw_distractor(img, rng)

    target = int(rng.integers(spec.min_lines, spec.max_lines + 1))
    placed = []
    groups = []
    attempts = 0
    while len(placed) < target and attempts < 200:
        attempts += 1
        lh = rng.uniform(*spec.line_height)
        angle = rng.uniform(-spec.max_angle, spec.max_angle) if spec.max_angle else 0.0
        n_lines = 1
        if target - len(placed) >= 2 and rng.random() < spec.paragraph_p:
            n_lines = int(rng.integers(2, min(3, target - len(placed)) + 1))
        if n_lines == 1:
            length = lh * rng.uniform(5.5, 12.0)
        else:
            length = lh * rng.uniform(3.0, 6.0)
        length = min(length, spec.max_length * w)
        gap = lh * rng.uniform(0.25, 0.45)
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        u = np.array([math.cos(angle), math.sin(angle)])
        v = np.array([-math.sin(angle), math.cos(angle)])
        boxes = []
        for i in range(n_lines):
            off = (i - (n_lines - 1) / 2) * (lh + gap)
            ln = length * (1.0 if i == 0 else rng.uniform(0.6, 1.0))
            shift = (ln - length) / 2 if rng.random() < 0.5 else 0.0
            c = np.array([cx, cy]) + v * off + u * shift
            boxes.append(OrientedBox(c[0], c[1], ln, lh, angle).normalized())
        group_box = OrientedBox(cx, cy, length, n_lines * lh + (n_lines - 1) * gap, angle)
        if not _fits(group_box, groups, h, w, max(8.0, 1.2 * lh), spec.margin):
            continue
        groups.append(group_box)
        placed.extend(boxes)

    contrast = 0.55 - 0.3 * difficulty
    for b in placed:
        bg = img[:, int(min(h - 1, max(0, b.cy))), int(min(w - 1, max(0, b.cx)))]
        sign = -1.0 if bg.mean() > 0.5 else 1.0
        ink = np.clip(bg + sign * rng.uniform(contrast, contrast + 0.25), 0, 1)
        _render_line(img, b, ink, rng, bank)

    img = np.clip(img, 0.0, 1.0)
    ann = Annotation("", placed, w, h)
    return img, ann
