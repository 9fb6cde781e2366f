"""Pure numpy implementations of the hot kernels.

Every function here has a twin in ``_kernels.pyx`` with the same signature
and bit-identical results; the compiled version is preferred when it built.
"""
import numpy as np


def im2col(xp, kh, kw, stride):
    """Unfold an already padded (C, H, W) map into (C*kh*kw, Ho*Wo) columns."""
    c, h, w = xp.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(c, kh, kw, ho, wo),
        strides=(sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return np.ascontiguousarray(windows).reshape(c * kh * kw, ho * wo)


def col2im(cols, c, h, w, kh, kw, stride):
    """Adjoint of :func:`im2col`; overlapping taps accumulate in (ki, kj) order."""
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    cols = cols.reshape(c, kh, kw, ho, wo)
    out = np.zeros((c, h, w), dtype=np.float64)
    for ki in range(kh):
        for kj in range(kw):
            out[:, ki:ki + stride * (ho - 1) + 1:stride,
                kj:kj + stride * (wo - 1) + 1:stride] += cols[:, ki, kj]
    return out


def maxpool2_forward(x):
    c, h, w = x.shape
    ho, wo = h // 2, w // 2
    win = x[:, :2 * ho, :2 * wo].reshape(c, ho, 2, wo, 2).transpose(0, 1, 3, 2, 4)
    win = win.reshape(c, ho, wo, 4)
    k = np.argmax(win, axis=3)
    out = np.take_along_axis(win, k[..., None], axis=3)[..., 0]
    rows = 2 * np.arange(ho)[:, None] + k // 2
    cols = 2 * np.arange(wo)[None, :] + k % 2
    argmax = (rows * w + cols).astype(np.int64)
    return np.ascontiguousarray(out), argmax


def maxpool2_backward(grad, argmax, h, w):
    c = grad.shape[0]
    dx = np.zeros((c, h * w), dtype=np.float64)
    np.put_along_axis(dx, argmax.reshape(c, -1), grad.reshape(c, -1), axis=1)
    return dx.reshape(c, h, w)


def _find(parent, i):
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        parent[i], i = root, parent[i]
    return root


def label8(mask):
    """Two-pass 8-connected labelling.

    Returns ``(labels, n)``; labels are int32, 0 for background, and
    foreground labels are numbered 1..n in raster order of each
    component's first pixel.
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    prov = np.zeros((h, w), dtype=np.int64)
    parent = [0]
    rows = mask.tolist()
    for y in range(h):
        row = rows[y]
        prev = prov[y - 1] if y > 0 else None
        cur = prov[y]
        for x in range(w):
            if not row[x]:
                continue
            neigh = []
            if x > 0 and cur[x - 1]:
                neigh.append(cur[x - 1])
            if prev is not None:
                for dx in (-1, 0, 1):
                    xx = x + dx
                    if 0 <= xx < w and prev[xx]:
                        neigh.append(prev[xx])
            if not neigh:
                parent.append(len(parent))
                cur[x] = len(parent) - 1
            else:
                roots = [_find(parent, int(n)) for n in neigh]
                r = min(roots)
                for other in roots:
                    parent[other] = r
                cur[x] = r
    final = np.zeros(len(parent), dtype=np.int32)
    labels = np.zeros((h, w), dtype=np.int32)
    n = 0
    for y in range(h):
        for x in range(w):
            p = prov[y, x]
            if p:
                r = _find(parent, int(p))
                if final[r] == 0:
                    n += 1
                    final[r] = n
                labels[y, x] = final[r]
    return labels, n
