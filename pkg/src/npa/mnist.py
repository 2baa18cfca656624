"""MNIST ingestion: IDX container parsing and digit-to-point-cloud conversion.

A digit image becomes a point cloud in three moves: nearest-neighbor
upsampling to 224^2, one uniformly jittered point per pixel brighter than
0.5, and thinning to a fixed count with farthest point sampling. The
result lives in [0, 1]^2 with +y up.
"""

import struct

import numpy as np

from .backend import HAVE_NUMBA
from .errors import FormatError, InputError

if HAVE_NUMBA:
    from numba import njit

    @njit(cache=True)
    def _fps_loop_nb(pts, sel, d2):
        m = pts.shape[0]
        for k in range(1, sel.shape[0]):
            best = 0
            bd = d2[0]
            for i in range(1, m):
                if d2[i] > bd:
                    bd = d2[i]
                    best = i
            sel[k] = best
            bx = pts[best, 0]
            by = pts[best, 1]
            for i in range(m):
                dx = pts[i, 0] - bx
                dy = pts[i, 1] - by
                dd = dx * dx + dy * dy
                if dd < d2[i]:
                    d2[i] = dd

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
UPSAMPLE_SIDE = 224
BRIGHTNESS_THRESHOLD = 0.5
POINTS_PER_DIGIT = 512


def _take(buf, offset, count, path):
    if len(buf) < offset + count:
        raise FormatError(
            f"{path}: truncated at offset {offset}: need {count} bytes, "
            f"have {len(buf) - offset}")
    return buf[offset:offset + count]


def read_idx_images(path):
    """Read an IDX image file -> (n, rows, cols) uint8."""
    with open(path, "rb") as f:
        buf = f.read()
    magic, = struct.unpack(">I", _take(buf, 0, 4, path))
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(
            f"{path}: bad magic 0x{magic:08x} at offset 0, "
            f"want 0x{IDX_IMAGES_MAGIC:08x}")
    n, rows, cols = struct.unpack(">3I", _take(buf, 4, 12, path))
    data = _take(buf, 16, n * rows * cols, path)
    return np.frombuffer(data, np.uint8).reshape(n, rows, cols)


def read_idx_labels(path):
    """Read an IDX label file -> (n,) uint8."""
    with open(path, "rb") as f:
        buf = f.read()
    magic, = struct.unpack(">I", _take(buf, 0, 4, path))
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(
            f"{path}: bad magic 0x{magic:08x} at offset 0, "
            f"want 0x{IDX_LABELS_MAGIC:08x}")
    n, = struct.unpack(">I", _take(buf, 4, 4, path))
    return np.frombuffer(_take(buf, 8, n, path), np.uint8).copy()


def write_idx_images(path, images):
    """Write (n, rows, cols) uint8 images in IDX layout (subset building)."""
    images = np.ascontiguousarray(images, np.uint8)
    if images.ndim != 3:
        raise InputError(f"images must be (n, rows, cols), got {images.shape}")
    with open(path, "wb") as f:
        f.write(struct.pack(">4I", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.ascontiguousarray(labels, np.uint8)
    if labels.ndim != 1:
        raise InputError(f"labels must be (n,), got {labels.shape}")
    with open(path, "wb") as f:
        f.write(struct.pack(">2I", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def ingest_mnist(image_path, label_path):
    """Read matching IDX image and label files -> (images, labels)."""
    images = read_idx_images(image_path)
    labels = read_idx_labels(label_path)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"image/label count mismatch: {images.shape[0]} images in "
            f"{image_path}, {labels.shape[0]} labels in {label_path}")
    return images, labels


def farthest_point_sample(points, n, rng):
    """Indices of n points greedily maximizing the minimum pairwise distance.

    The first point is drawn from rng; everything after is deterministic.
    """
    m = points.shape[0]
    if n < 1 or n > m:
        raise InputError(f"cannot pick {n} of {m} points")
    sel = np.empty(n, np.int64)
    sel[0] = rng.integers(m)
    d2 = np.sum((points - points[sel[0]]) ** 2, axis=1)
    if HAVE_NUMBA and points.shape[1] == 2:
        pts = np.ascontiguousarray(points, np.float64)
        _fps_loop_nb(pts, sel, d2.astype(np.float64))
        return sel
    for k in range(1, n):
        i = int(np.argmax(d2))
        sel[k] = i
        np.minimum(d2, np.sum((points - points[i]) ** 2, axis=1), out=d2)
    return sel


def sample_point_digit(image, rng, n_points=POINTS_PER_DIGIT):
    """One digit image -> (n_points, 2) float64 cloud in [0, 1]^2, +y up."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise InputError(f"digit image must be 2d, got shape {img.shape}")
    val = img.astype(np.float64) / 255.0 if img.dtype == np.uint8 else \
        img.astype(np.float64)
    side = UPSAMPLE_SIDE
    iy = np.arange(side) * val.shape[0] // side
    ix = np.arange(side) * val.shape[1] // side
    up = val[np.ix_(iy, ix)]
    rows, cols = np.nonzero(up > BRIGHTNESS_THRESHOLD)
    if rows.size == 0:
        raise InputError("blank digit image: no pixels above threshold")
    if rows.size < n_points:
        raise InputError(
            f"digit too sparse: {rows.size} candidate pixels < {n_points}")
    px = (cols + rng.random(cols.size)) / side
    py = 1.0 - (rows + rng.random(rows.size)) / side
    pts = np.stack([px, py], axis=1)
    return pts[farthest_point_sample(pts, n_points, rng)]
