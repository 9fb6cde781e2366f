"""Binary portable pixmap (P6) and graymap (P5) reading and writing."""
import numpy as np


def _tokens(data, count, pos):
    out = []
    n = len(data)
    while len(out) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ValueError("truncated PNM header")
        out.append(data[start:pos])
    return out, pos


def decode_pnm(data):
    """Decode P5/P6 bytes into an (H, W) or (H, W, 3) uint8/uint16 array."""
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported PNM magic {magic!r} (need binary P5 or P6)")
    (w, h, maxval), pos = _tokens(data, 3, 2)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise ValueError("non-numeric PNM header field") from None
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise ValueError(f"bad PNM header: {w}x{h} maxval {maxval}")
    pos += 1  # single whitespace byte before the raster
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = w * h * channels
    if len(data) - pos < count * dtype.itemsize:
        raise ValueError("PNM raster is truncated")
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return arr.reshape(shape), maxval


def read_pnm(path):
    with open(path, "rb") as f:
        return decode_pnm(f.read())


def read_image(path):
    """Load a P5/P6 file as a (3, H, W) float image in [0, 1]."""
    arr, maxval = read_pnm(path)
    img = arr.astype(np.float64) / maxval
    if img.ndim == 2:
        img = np.repeat(img[None], 3, axis=0)
    else:
        img = img.transpose(2, 0, 1)
    return np.ascontiguousarray(img)


def encode_pnm(arr):
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise ValueError("encode_pnm expects uint8 data")
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode array of shape {arr.shape}")
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr).tobytes()


def to_uint8(x):
    return np.clip(np.round(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, image):
    """Write a (3, H, W) float image in [0, 1] as P6."""
    with open(path, "wb") as f:
        f.write(encode_pnm(to_uint8(np.asarray(image).transpose(1, 2, 0))))


def write_heatmap(path, heatmap):
    """Write a probability map as an 8-bit P5 graymap (value = round(255 p))."""
    with open(path, "wb") as f:
        f.write(encode_pnm(to_uint8(heatmap)))
