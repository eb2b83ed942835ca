"""Binary PGM (P5) images for qualitative dumps.

Grayscale is enough for heatmaps, instance masks, and semantic maps, and
the format needs nothing beyond the stdlib to read back.
"""

import numpy as np


def write_pgm(path, img):
    """Write a 2D uint8 array as binary PGM."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"PGM images are 2D, got shape {img.shape}")
    if img.dtype != np.uint8:
        raise ValueError(f"PGM images are uint8, got {img.dtype}")
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        f.write(img.tobytes())


def read_pgm(path):
    """Read a binary PGM written by write_pgm (or any maxval-255 P5)."""
    with open(path, "rb") as f:
        data = f.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":          # comment to end of line
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    pos += 1                                   # single whitespace after maxval
    if fields[0] != b"P5":
        raise ValueError(f"not a binary PGM: magic {fields[0]!r}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"only maxval 255 supported, got {maxval}")
    if len(data) - pos < h * w:
        raise ValueError("truncated PGM payload")
    img = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=pos)
    return img.reshape(h, w).copy()


def to_gray(arr, lo=None, hi=None):
    """Map a 2D float/int array linearly onto [0, 255] uint8.

    Bounds default to the array's own min/max; a constant array maps to 0.
    """
    arr = np.asarray(arr, dtype=np.float64)
    lo = float(np.min(arr)) if lo is None else float(lo)
    hi = float(np.max(arr)) if hi is None else float(hi)
    if hi <= lo:
        return np.zeros(arr.shape, dtype=np.uint8)
    scaled = (np.clip(arr, lo, hi) - lo) / (hi - lo)
    return np.round(scaled * 255.0).astype(np.uint8)
