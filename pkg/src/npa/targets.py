"""Morphogenesis targets: RGBA images converted to colored point sets.

Any RGBA image works as a target; two parametric shapes (disc, ring) are
built in so nothing has to be shipped. Conversion follows the same path for
both: rejection-sample pixels on alpha, jitter within the accepted pixel,
map into a centered world square with +y up, and take the pixel's RGB.
"""

import numpy as np

from .errors import InputError


def make_disc(resolution=96, radius=0.7, color=(0.95, 0.55, 0.1)):
    """RGBA uint8 disc; radius is a fraction of the half-image."""
    return _draw(resolution, lambda r: r <= radius, color)


def make_ring(resolution=96, inner=0.45, outer=0.7, color=(0.15, 0.5, 0.9)):
    """RGBA uint8 ring between the two fractional radii."""
    return _draw(resolution, lambda r: (r >= inner) & (r <= outer), color)


def _draw(resolution, inside, color):
    ax = (np.arange(resolution) + 0.5) / resolution * 2.0 - 1.0
    r = np.sqrt(ax[None, :] ** 2 + ax[:, None] ** 2)
    mask = inside(r)
    img = np.zeros((resolution, resolution, 4), dtype=np.uint8)
    for k in range(3):
        img[:, :, k] = np.uint8(round(color[k] * 255))
    img[:, :, 3] = np.where(mask, 255, 0)
    return img


def load_rgba(path):
    """Load an RGBA image file (requires pillow)."""
    try:
        from PIL import Image
    except ImportError as e:
        raise InputError(
            "reading image targets requires pillow; use the built-in "
            "'disc'/'ring' targets or install pillow") from e
    with Image.open(path) as im:
        return np.asarray(im.convert("RGBA"))


def named_target(name):
    """Resolve a --target value: 'disc', 'ring', or an image path."""
    if name == "disc":
        return make_disc()
    if name == "ring":
        return make_ring()
    return load_rgba(name)


def target_points(rgba, n, rng, extent=1.0):
    """Rejection-sample n points from an RGBA image on alpha.

    Returns (points (n, 2) in the centered extent-sized square, colors
    (n, 3) in [0, 1]). Raises InputError when no pixel is opaque enough.
    """
    rgba = np.asarray(rgba)
    if rgba.ndim != 3 or rgba.shape[2] != 4:
        raise InputError(f"target must be (H, W, 4) RGBA, got {rgba.shape}")
    H, W = rgba.shape[:2]
    alpha = rgba[:, :, 3].astype(np.float64) / 255.0
    ys, xs = np.nonzero(alpha > 0.05)
    if ys.size == 0:
        raise InputError("target image has no visible pixels (alpha all ~0)")
    a = alpha[ys, xs]
    pts = np.empty((n, 2), dtype=np.float64)
    cols = np.empty((n, 3), dtype=np.float64)
    got = 0
    while got < n:
        take = min(4 * (n - got) + 16, 1 << 20)
        idx = rng.integers(0, ys.size, take)
        keep = idx[rng.random(take) < a[idx]][:n - got]
        if keep.size == 0:
            continue
        py = ys[keep] + rng.random(keep.size)
        px = xs[keep] + rng.random(keep.size)
        # image rows grow downward; world +y points up
        pts[got:got + keep.size, 0] = (px / W - 0.5) * extent
        pts[got:got + keep.size, 1] = (0.5 - py / H) * extent
        cols[got:got + keep.size] = rgba[ys[keep], xs[keep], :3] / 255.0
        got += keep.size
    return pts, cols
