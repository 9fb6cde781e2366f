"""Heat-map post-processing and box geometry.

Coordinate convention: x grows right, y grows down; pixel (row r, col c)
covers the unit square [c, c+1) x [r, r+1) with centre (c+0.5, r+0.5).
An ``OrientedBox`` angle is the direction of its width axis, measured from +x
towards +y.
"""
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from cctn import kernels

HALF_PI = math.pi / 2


def normalize_angle(w, h, angle):
    """Return ``(w, h, angle)`` with w >= h and angle in (-pi/2, pi/2].

    Squares (w == h) are further brought into (-pi/4, pi/4].
    """
    if h > w:
        w, h, angle = h, w, angle + HALF_PI
    angle = math.remainder(angle, math.pi)  # [-pi/2, pi/2]
    if angle <= -HALF_PI:
        angle += math.pi
    if w == h:
        while angle > math.pi / 4:
            angle -= HALF_PI
        while angle <= -math.pi / 4:
            angle += HALF_PI
    return w, h, angle


@dataclass(frozen=True)
class OrientedBox:
    cx: float
    cy: float
    w: float
    h: float
    angle: float = 0.0

    @classmethod
    def from_xyxy(cls, x1, y1, x2, y2):
        x1, x2 = sorted((x1, x2))
        y1, y2 = sorted((y1, y2))
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1, 0.0).normalized()

    def normalized(self):
        w, h, a = normalize_angle(float(self.w), float(self.h), float(self.angle))
        return OrientedBox(float(self.cx), float(self.cy), w, h, a)

    @property
    def area(self):
        return self.w * self.h

    @property
    def axes(self):
        """Unit vectors along the width and height directions."""
        c, s = math.cos(self.angle), math.sin(self.angle)
        return np.array([c, s]), np.array([-s, c])

    def corners(self):
        u, v = self.axes
        c = np.array([self.cx, self.cy])
        hw, hh = self.w / 2, self.h / 2
        return np.array([c - u * hw - v * hh, c + u * hw - v * hh,
                         c + u * hw + v * hh, c - u * hw + v * hh])

    def aabb(self):
        """Axis-aligned bounds ``(x1, y1, x2, y2)``."""
        p = self.corners()
        return (p[:, 0].min(), p[:, 1].min(), p[:, 0].max(), p[:, 1].max())

    def axis_aligned(self):
        return OrientedBox.from_xyxy(*self.aabb())

    def contains(self, x, y, tol=1e-9):
        """Vectorised point-in-rectangle test (boundary counts as inside)."""
        u, v = self.axes
        dx = np.asarray(x, dtype=np.float64) - self.cx
        dy = np.asarray(y, dtype=np.float64) - self.cy
        a = dx * u[0] + dy * u[1]
        b = dx * v[0] + dy * v[1]
        return (np.abs(a) <= self.w / 2 + tol) & (np.abs(b) <= self.h / 2 + tol)

    def pixel_mask(self, shape):
        """Pixels whose centres fall inside the box."""
        hgt, wid = shape
        mask = np.zeros(shape, dtype=bool)
        x1, y1, x2, y2 = self.aabb()
        c0, c1 = max(0, int(math.floor(x1 - 0.5))), min(wid, int(math.ceil(x2 + 0.5)))
        r0, r1 = max(0, int(math.floor(y1 - 0.5))), min(hgt, int(math.ceil(y2 + 0.5)))
        if c0 >= c1 or r0 >= r1:
            return mask
        yy, xx = np.mgrid[r0:r1, c0:c1]
        mask[r0:r1, c0:c1] = self.contains(xx + 0.5, yy + 0.5)
        return mask

    def as_tuple(self):
        return (self.cx, self.cy, self.w, self.h, self.angle)


class Detection(NamedTuple):
    box: OrientedBox
    score: float


# ---------------------------------------------------------------- affine maps

class Affine:
    """2-D affine map ``p -> A @ p + t`` stored as a 2x3 matrix."""

    def __init__(self, matrix):
        self.m = np.asarray(matrix, dtype=np.float64).reshape(2, 3)

    @classmethod
    def identity(cls):
        return cls([[1, 0, 0], [0, 1, 0]])

    @classmethod
    def scale(cls, sx, sy=None):
        sy = sx if sy is None else sy
        return cls([[sx, 0, 0], [0, sy, 0]])

    @classmethod
    def similarity(cls, scale, angle, src_center, dst_center):
        """Rotate by ``angle`` and scale about ``src_center``, landing on ``dst_center``."""
        c, s = math.cos(angle) * scale, math.sin(angle) * scale
        a = np.array([[c, -s], [s, c]])
        t = np.asarray(dst_center, dtype=np.float64) - a @ np.asarray(src_center, dtype=np.float64)
        return cls(np.column_stack([a, t]))

    def __matmul__(self, other):
        a = self.m[:, :2] @ other.m[:, :2]
        t = self.m[:, :2] @ other.m[:, 2] + self.m[:, 2]
        return Affine(np.column_stack([a, t]))

    def inverse(self):
        a = np.linalg.inv(self.m[:, :2])
        return Affine(np.column_stack([a, -a @ self.m[:, 2]]))

    def apply(self, points):
        p = np.asarray(points, dtype=np.float64)
        return p @ self.m[:, :2].T + self.m[:, 2]

    @property
    def scales(self):
        """Length scale factors of the x and y axes."""
        return np.hypot(self.m[0, :2], self.m[1, :2])

    def map_box(self, box):
        """Image of a box under the map.

        Exact whenever the map keeps the box's axes orthogonal (similarities,
        flips, axis scaling of axis-aligned boxes); otherwise the result is the
        min-area rectangle of the mapped corners.
        """
        a = self.m[:, :2]
        u = a @ box.axes[0]
        v = a @ box.axes[1]
        nu, nv = np.linalg.norm(u), np.linalg.norm(v)
        if abs(u @ v) <= 1e-12 * max(nu * nv, 1e-300):
            c = self.apply([[box.cx, box.cy]])[0]
            return OrientedBox(c[0], c[1], box.w * nu, box.h * nv, math.atan2(u[1], u[0])).normalized()
        return min_area_rect_points(self.apply(box.corners()))

    def to_list(self):
        return self.m.ravel().tolist()


# ---------------------------------------------------------------- binarize / components

def binarize(heatmap, threshold):
    """Pixels strictly above ``threshold``."""
    return np.asarray(heatmap) > threshold


@dataclass
class Component:
    rows: np.ndarray
    cols: np.ndarray
    top: int
    left: int
    bottom: int  # inclusive
    right: int  # inclusive

    @property
    def area(self):
        return int(self.rows.size)

    @property
    def bbox_w(self):
        return self.right - self.left + 1

    @property
    def bbox_h(self):
        return self.bottom - self.top + 1

    @property
    def area_ratio(self):
        return self.area / (self.bbox_w * self.bbox_h)

    @property
    def borderline_ratio(self):
        return max(self.bbox_w, self.bbox_h) / min(self.bbox_w, self.bbox_h)

    def bbox(self):
        """Bounding box in continuous pixel coordinates."""
        return OrientedBox.from_xyxy(self.left, self.top, self.right + 1, self.bottom + 1)

    def mask(self, shape):
        m = np.zeros(shape, dtype=bool)
        m[self.rows, self.cols] = True
        return m


def connected_components(mask, min_pixels=1):
    """8-connected components ordered by (top, left) of their bounding boxes."""
    mask = np.asarray(mask, dtype=bool)
    labels, n = kernels.label8(mask)
    if n == 0:
        return []
    flat = labels.ravel()
    idx = np.flatnonzero(flat)
    lab = flat[idx]
    order = np.argsort(lab, kind="stable")
    idx, lab = idx[order], lab[order]
    starts = np.searchsorted(lab, np.arange(1, n + 1))
    ends = np.append(starts[1:], idx.size)
    w = mask.shape[1]
    comps = []
    for s, e in zip(starts, ends):
        pix = idx[s:e]
        if pix.size < min_pixels:
            continue
        rows, cols = pix // w, pix % w
        comps.append(Component(rows, cols, int(rows.min()), int(cols.min()),
                               int(rows.max()), int(cols.max())))
    # labels already follow the first pixel in raster order, which breaks ties
    comps.sort(key=lambda c: (c.top, c.left))
    return comps


# ---------------------------------------------------------------- coarse rule

@dataclass(frozen=True)
class FinalLine:
    box: OrientedBox


@dataclass(frozen=True)
class Region:
    cx: float
    cy: float
    side: float

    def box(self):
        return OrientedBox(self.cx, self.cy, self.side, self.side, 0.0)


def coarse_decide(component, frame=None, area_ratio_thr=0.7, borderline_thr=5.0, enlarge=1.2):
    """Split a coarse component into a direct text line or a region to refine.

    Ratios are measured on the heat-map raster; ``frame`` maps heat-map
    coordinates to the original image (identity when omitted).
    """
    if component.area < 1:
        raise ValueError("coarse_decide needs a non-empty component")
    frame = Affine.identity() if frame is None else frame
    box = frame.map_box(component.bbox()).axis_aligned()
    if component.area_ratio > area_ratio_thr and component.borderline_ratio > borderline_thr:
        return FinalLine(box)
    return Region(box.cx, box.cy, enlarge * max(box.w, box.h))


# ---------------------------------------------------------------- min-area rectangle

def convex_hull(points):
    """Counter-clockwise hull (in x-right/y-up orientation) without collinear points."""
    pts = np.unique(np.asarray(points, dtype=np.float64).reshape(-1, 2), axis=0)
    if len(pts) <= 2:
        return pts
    pts = pts.tolist()

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def min_area_rect_points(points):
    """Minimum-area enclosing rectangle of a point set by rotating calipers.

    Degenerate inputs give zero-height (collinear) or zero-size (single
    point) boxes.
    """
    hull = convex_hull(points)
    if len(hull) == 0:
        raise ValueError("min_area_rect needs at least one point")
    if len(hull) == 1:
        return OrientedBox(hull[0, 0], hull[0, 1], 0.0, 0.0, 0.0)
    if len(hull) == 2:
        d = hull[1] - hull[0]
        c = hull.mean(axis=0)
        return OrientedBox(c[0], c[1], float(np.hypot(*d)), 0.0, math.atan2(d[1], d[0])).normalized()

    n = len(hull)
    edges = np.roll(hull, -1, axis=0) - hull
    units = edges / np.hypot(edges[:, 0], edges[:, 1])[:, None]

    def proj(i, d):
        return hull[i % n] @ d

    best = None
    r = t = l = None
    for i in range(n):
        u = units[i]
        nrm = np.array([-u[1], u[0]])  # interior side of a CCW hull
        if i == 0:
            du = hull @ u
            dn = hull @ nrm
            r, t = int(np.argmax(du)), int(np.argmax(dn))
            l = int(np.argmin(du))
        else:
            for _ in range(n):
                if proj(r + 1, u) > proj(r, u) + 1e-12:
                    r += 1
                else:
                    break
            for _ in range(n):
                if proj(t + 1, nrm) > proj(t, nrm) + 1e-12:
                    t += 1
                else:
                    break
            for _ in range(n):
                if proj(l + 1, u) < proj(l, u) - 1e-12:
                    l += 1
                else:
                    break
        umin, umax = proj(l, u), proj(r, u)
        nmin, nmax = hull[i] @ nrm, proj(t, nrm)
        area = (umax - umin) * (nmax - nmin)
        if best is None or area < best[0] - 1e-12 * max(1.0, abs(best[0])):
            best = (area, u, nrm, umin, umax, nmin, nmax)
    _, u, nrm, umin, umax, nmin, nmax = best
    c = u * (umin + umax) / 2 + nrm * (nmin + nmax) / 2
    return OrientedBox(c[0], c[1], umax - umin, nmax - nmin, math.atan2(u[1], u[0])).normalized()


def pixel_corners(rows, cols):
    """Corner points of the row-wise extreme pixels (enough for the hull)."""
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    first = np.r_[True, rows[1:] != rows[:-1]]
    last = np.r_[rows[1:] != rows[:-1], True]
    r = np.concatenate([rows[first], rows[last]])
    c = np.concatenate([cols[first], cols[last]])
    pts = np.concatenate([np.column_stack([c, r]), np.column_stack([c + 1, r]),
                          np.column_stack([c, r + 1]), np.column_stack([c + 1, r + 1])])
    return pts.astype(np.float64)


def min_area_rect(rows, cols):
    """Minimum-area rectangle enclosing a pixel set (pixels as unit squares)."""
    if len(rows) == 0:
        raise ValueError("min_area_rect needs at least one pixel")
    return min_area_rect_points(pixel_corners(rows, cols))


# ---------------------------------------------------------------- fine extraction

def _mean_in_box(heatmap, box):
    m = box.pixel_mask(heatmap.shape)
    return float(heatmap[m].mean()) if m.any() else 0.0


def fine_extract(cl_map, tl_map, threshold=0.5, transform=None, min_pixels=1, clip=True):
    """Text lines from central-line and text-line heat-maps.

    Each central-line component gives a preliminary box (its min-area
    rectangle with doubled height); the text-line component associated with it
    then supplies the line's top/bottom and length.  ``transform`` maps map
    coordinates back to the original image.  Returns a list of
    :class:`Detection` scored by the mean text-line heat over the box.
    """
    cl_map = np.asarray(cl_map, dtype=np.float64)
    tl_map = np.asarray(tl_map, dtype=np.float64)
    if cl_map.shape != tl_map.shape:
        raise ValueError(f"heat-maps differ in size: {cl_map.shape} vs {tl_map.shape}")
    cl_comps = connected_components(binarize(cl_map, threshold), min_pixels)
    if not cl_comps:
        return []
    tl_mask = binarize(tl_map, threshold)
    tl_labels, _ = kernels.label8(tl_mask)
    hgt, wid = cl_map.shape

    assoc = []
    for comp in cl_comps:
        mar = min_area_rect(comp.rows, comp.cols)
        cx, cy = int(math.floor(mar.cx)), int(math.floor(mar.cy))
        label = 0
        if 0 <= cy < hgt and 0 <= cx < wid:
            label = int(tl_labels[cy, cx])
        if label == 0:
            hits = tl_labels[comp.rows, comp.cols]
            hits = hits[hits > 0]
            if hits.size:
                label = int(np.bincount(hits).argmax())
        assoc.append((comp, mar, label))
    assoc = _join_collinear(assoc)
    shared = {}
    for _, _, label in assoc:
        shared[label] = shared.get(label, 0) + 1

    out = []
    for _, mar, label in assoc:
        box = OrientedBox(mar.cx, mar.cy, mar.w, 2 * mar.h, mar.angle)
        # a text-line blob shared by several central lines cannot separate them
        if label and shared[label] == 1:
            rr, cc = np.nonzero(tl_labels == label)
            tl_mar = min_area_rect(rr, cc)
            u, v = box.axes
            rel = tl_mar.corners() - np.array([box.cx, box.cy])
            pv, pu = rel @ v, rel @ u
            top, bottom = pv.min(), pv.max()
            lo, hi = pu.min(), pu.max()
            if bottom - top > 0 and hi - lo > 0:
                c = np.array([box.cx, box.cy]) + v * (top + bottom) / 2 + u * (lo + hi) / 2
                box = OrientedBox(c[0], c[1], hi - lo, bottom - top, box.angle).normalized()
        if clip:
            box = clip_box(box, wid, hgt)
            if box is None:
                continue
        score = _mean_in_box(tl_map, box)
        if transform is not None:
            box = transform.map_box(box)
        out.append(Detection(box, score))
    return out


def _join_collinear(assoc):
    """Merge central-line pieces of one text-line blob that lie on one axis.

    A thresholded central line can break into several pieces along its
    length.  Pieces whose centres sit within one band thickness of each
    other across the axis belong to the same line; stacked lines are a full
    line pitch apart and stay separate.
    """
    n = len(assoc)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            (ci, mi, li), (cj, mj, lj) = assoc[i], assoc[j]
            if not li or li != lj:
                continue
            ref = mi if ci.area >= cj.area else mj
            v = ref.axes[1]
            offset = abs((mj.cx - mi.cx) * v[0] + (mj.cy - mi.cy) * v[1])
            if offset < max(mi.h, mj.h):
                parent[find(i)] = find(j)
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    if len(groups) == n:
        return assoc
    out = []
    for members in sorted(groups.values()):
        if len(members) == 1:
            out.append(assoc[members[0]])
            continue
        rows = np.concatenate([assoc[i][0].rows for i in members])
        cols = np.concatenate([assoc[i][0].cols for i in members])
        out.append((None, min_area_rect(rows, cols), assoc[members[0]][2]))
    return out


def clip_box(box, width, height):
    """Shrink a box so its corners stay inside [0, width] x [0, height].

    Boxes are clipped along their own axes so the orientation survives;
    returns None when nothing of the box remains inside.
    """
    corners = box.corners()
    if (corners[:, 0].min() >= -1e-9 and corners[:, 1].min() >= -1e-9
            and corners[:, 0].max() <= width + 1e-9 and corners[:, 1].max() <= height + 1e-9):
        return box
    poly = clip_polygon(corners, 0, 0, width, height)
    if len(poly) < 3 or polygon_area(poly) <= 0:
        return None
    u, v = box.axes
    c = np.array([box.cx, box.cy])
    pu, pv = (poly - c) @ u, (poly - c) @ v
    lo, hi, top, bottom = pu.min(), pu.max(), pv.min(), pv.max()
    # keep the box inside the frame: shrink along each axis until all corners fit
    for _ in range(60):
        nc = c + u * (lo + hi) / 2 + v * (top + bottom) / 2
        cand = OrientedBox(nc[0], nc[1], hi - lo, bottom - top, box.angle)
        p = cand.corners()
        if (p[:, 0].min() >= -1e-6 and p[:, 1].min() >= -1e-6
                and p[:, 0].max() <= width + 1e-6 and p[:, 1].max() <= height + 1e-6):
            return cand.normalized() if cand.w > 0 and cand.h > 0 else None
        shrink_u = (hi - lo) * 0.02
        shrink_v = (bottom - top) * 0.02
        lo, hi, top, bottom = lo + shrink_u, hi - shrink_u, top + shrink_v, bottom - shrink_v
    return None


def clip_polygon(poly, x1, y1, x2, y2):
    """Sutherland-Hodgman clip of a convex polygon to an axis-aligned window."""
    pts = [tuple(p) for p in np.asarray(poly, dtype=np.float64)]
    for axis, bound, keep_ge in ((0, x1, True), (0, x2, False), (1, y1, True), (1, y2, False)):
        if not pts:
            break
        res = []
        for i, cur in enumerate(pts):
            prev = pts[i - 1]
            cin = cur[axis] >= bound if keep_ge else cur[axis] <= bound
            pin = prev[axis] >= bound if keep_ge else prev[axis] <= bound
            if cin != pin:
                t = (bound - prev[axis]) / (cur[axis] - prev[axis])
                res.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            if cin:
                res.append(cur)
        pts = res
    return np.array(pts).reshape(-1, 2)


def polygon_area(poly):
    p = np.asarray(poly, dtype=np.float64)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return float(abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))) / 2)


# ---------------------------------------------------------------- mapping and merging

def map_to_image(box, transform):
    """Map a box from a working frame back to the original image.

    ``transform`` is the original-to-working map recorded when the working
    frame was made.
    """
    return transform.inverse().map_box(box)


def aabb_iou(a, b):
    ax1, ay1, ax2, ay2 = a.aabb()
    bx1, by1, bx2, by2 = b.aabb()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def _union_box(a, b):
    # min-area rectangle of both boxes' corners: the union bounding box for
    # axis-aligned pairs, and orientation-preserving for rotated pairs
    return min_area_rect_points(np.vstack([a.corners(), b.corners()]))


def merge_scales(dets_a, dets_b=(), iou_thr=0.5):
    """Collapse overlapping detections (axis-aligned IoU > ``iou_thr``) to fixpoint.

    The pair with the highest IoU merges first; the merged box is the union
    rectangle and keeps the higher score.  Output is sorted by centre (y, x).
    """
    dets = [d if isinstance(d, Detection) else Detection(d, 1.0) for d in list(dets_a) + list(dets_b)]
    while True:
        best = None
        for i in range(len(dets)):
            for j in range(i + 1, len(dets)):
                iou = aabb_iou(dets[i].box, dets[j].box)
                if iou > iou_thr and (best is None or iou > best[0]):
                    best = (iou, i, j)
        if best is None:
            break
        _, i, j = best
        merged = Detection(_union_box(dets[i].box, dets[j].box), max(dets[i].score, dets[j].score))
        dets = [d for k, d in enumerate(dets) if k not in (i, j)] + [merged]
    return sorted(dets, key=lambda d: (round(d.box.cy, 9), round(d.box.cx, 9), d.box.w, d.box.h))


def format_detections(dets):
    """Detection file body: ``cx,cy,w,h,theta_radians,score`` per line."""
    return "".join(
        f"{d.box.cx:.4f},{d.box.cy:.4f},{d.box.w:.4f},{d.box.h:.4f},{d.box.angle:.6f},{d.score:.6f}\n"
        for d in dets
    )


def parse_detections(text):
    dets = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        try:
            vals = [float(p) for p in parts[:6]]
        except ValueError:
            raise ValueError(f"detection line {lineno}: non-numeric field in {line!r}") from None
        if len(vals) == 5:
            vals.append(1.0)
        if len(vals) != 6:
            raise ValueError(f"detection line {lineno}: expected 6 fields, got {len(parts)}")
        dets.append(Detection(OrientedBox(*vals[:5]).normalized(), vals[5]))
    return dets
