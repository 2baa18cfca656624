"""Differentiable isotropic Gaussian splatting onto a square pixel grid.

Forward accumulation is unnormalized:

    density(p) = sum_i exp(-|p - pi(x_i)|^2 / (2 sigma^2))
    color(p)   = sum_i c_i exp(-|p - pi(x_i)|^2 / (2 sigma^2))

where pi maps world coordinates to pixel coordinates over a square window
(row 0 is the top of the window, so world +y points up in the image). The
kernel is truncated at 3 sigma. Both adjoints are analytic; position
gradients are what lets a rendered loss move particles.

The per-particle loop is compiled with numba when available; the numpy
fallback accumulates in the same particle order with float64 scratch, so
each backend is deterministic on its own. The two backends may differ in
the last ulp of exp().
"""

from dataclasses import dataclass

import numpy as np

from .backend import HAVE_NUMBA
from .errors import InputError

SIGMA_PX = 1.5
TRUNC_SIGMAS = 3.0


@dataclass(frozen=True)
class SplatConfig:
    resolution: int = 128
    sigma_px: float = SIGMA_PX
    # world window: lower corner and side of the rendered square
    x_lo: float = -0.5
    y_lo: float = -0.5
    side: float = 1.0

    def __post_init__(self):
        if self.resolution < 2 or self.side <= 0 or self.sigma_px <= 0:
            raise InputError(f"bad splat config {self}")


@dataclass
class SplatImage:
    density: np.ndarray   # (R, R)
    color: np.ndarray     # (R, R, 3)


def window_from_points(pts, pad=0.1):
    """Square window covering the point bounding box, padded by `pad` of the
    half-extent on each side."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    c = 0.5 * (lo + hi)
    half = float(max(hi[0] - lo[0], hi[1] - lo[1])) * 0.5 * (1.0 + pad)
    half = max(half, 1e-6)
    return float(c[0] - half), float(c[1] - half), 2.0 * half


def _splat_fwd_np(x, c, R, sigma, trunc, x_lo, y_hi, scale):
    dens = np.zeros((R, R), dtype=np.float64)
    col = np.zeros((R, R, 3), dtype=np.float64)
    inv2s2 = 1.0 / (2.0 * sigma * sigma)
    for i in range(x.shape[0]):
        u = (x[i, 0] - x_lo) * scale - 0.5
        v = (y_hi - x[i, 1]) * scale - 0.5
        j0 = max(0, int(np.ceil(u - trunc)))
        j1 = min(R - 1, int(np.floor(u + trunc)))
        i0 = max(0, int(np.ceil(v - trunc)))
        i1 = min(R - 1, int(np.floor(v + trunc)))
        if j0 > j1 or i0 > i1:
            continue
        jj = np.arange(j0, j1 + 1, dtype=np.float64)
        ii = np.arange(i0, i1 + 1, dtype=np.float64)
        w = np.exp(-((jj[None, :] - u) ** 2 + (ii[:, None] - v) ** 2) * inv2s2)
        dens[i0:i1 + 1, j0:j1 + 1] += w
        for k in range(3):
            col[i0:i1 + 1, j0:j1 + 1, k] += c[i, k] * w
    return dens, col


def _splat_bwd_np(x, c, R, sigma, trunc, x_lo, y_hi, scale, d_bar, c_bar):
    N = x.shape[0]
    x_bar = np.zeros((N, 2), dtype=np.float64)
    col_bar = np.zeros((N, 3), dtype=np.float64)
    inv2s2 = 1.0 / (2.0 * sigma * sigma)
    inv_s2 = 1.0 / (sigma * sigma)
    for i in range(N):
        u = (x[i, 0] - x_lo) * scale - 0.5
        v = (y_hi - x[i, 1]) * scale - 0.5
        j0 = max(0, int(np.ceil(u - trunc)))
        j1 = min(R - 1, int(np.floor(u + trunc)))
        i0 = max(0, int(np.ceil(v - trunc)))
        i1 = min(R - 1, int(np.floor(v + trunc)))
        if j0 > j1 or i0 > i1:
            continue
        jj = np.arange(j0, j1 + 1, dtype=np.float64)
        ii = np.arange(i0, i1 + 1, dtype=np.float64)
        w = np.exp(-((jj[None, :] - u) ** 2 + (ii[:, None] - v) ** 2) * inv2s2)
        cb = c_bar[i0:i1 + 1, j0:j1 + 1, :]
        wb = d_bar[i0:i1 + 1, j0:j1 + 1] + (c[i, 0] * cb[:, :, 0]
                                            + c[i, 1] * cb[:, :, 1]
                                            + c[i, 2] * cb[:, :, 2])
        gu = np.sum(wb * w * (jj[None, :] - u)) * inv_s2
        gv = np.sum(wb * w * (ii[:, None] - v)) * inv_s2
        x_bar[i, 0] = gu * scale
        x_bar[i, 1] = -gv * scale
        for k in range(3):
            col_bar[i, k] = np.sum(w * cb[:, :, k])
    return x_bar, col_bar


if HAVE_NUMBA:
    import math

    from numba import njit

    @njit(cache=True)
    def _splat_fwd_nb(x, c, R, sigma, trunc, x_lo, y_hi, scale):
        dens = np.zeros((R, R), dtype=np.float64)
        col = np.zeros((R, R, 3), dtype=np.float64)
        inv2s2 = 1.0 / (2.0 * sigma * sigma)
        for i in range(x.shape[0]):
            u = (x[i, 0] - x_lo) * scale - 0.5
            v = (y_hi - x[i, 1]) * scale - 0.5
            j0 = max(0, int(np.ceil(u - trunc)))
            j1 = min(R - 1, int(np.floor(u + trunc)))
            i0 = max(0, int(np.ceil(v - trunc)))
            i1 = min(R - 1, int(np.floor(v + trunc)))
            for row in range(i0, i1 + 1):
                dy = row - v
                for jcol in range(j0, j1 + 1):
                    dx = jcol - u
                    w = math.exp(-(dx * dx + dy * dy) * inv2s2)
                    dens[row, jcol] += w
                    col[row, jcol, 0] += c[i, 0] * w
                    col[row, jcol, 1] += c[i, 1] * w
                    col[row, jcol, 2] += c[i, 2] * w
        return dens, col

    @njit(cache=True)
    def _splat_bwd_nb(x, c, R, sigma, trunc, x_lo, y_hi, scale, d_bar, c_bar):
        N = x.shape[0]
        x_bar = np.zeros((N, 2), dtype=np.float64)
        col_bar = np.zeros((N, 3), dtype=np.float64)
        inv2s2 = 1.0 / (2.0 * sigma * sigma)
        inv_s2 = 1.0 / (sigma * sigma)
        for i in range(N):
            u = (x[i, 0] - x_lo) * scale - 0.5
            v = (y_hi - x[i, 1]) * scale - 0.5
            j0 = max(0, int(np.ceil(u - trunc)))
            j1 = min(R - 1, int(np.floor(u + trunc)))
            i0 = max(0, int(np.ceil(v - trunc)))
            i1 = min(R - 1, int(np.floor(v + trunc)))
            gu = 0.0
            gv = 0.0
            g0 = 0.0
            g1 = 0.0
            g2 = 0.0
            for row in range(i0, i1 + 1):
                dy = row - v
                for jcol in range(j0, j1 + 1):
                    dx = jcol - u
                    w = math.exp(-(dx * dx + dy * dy) * inv2s2)
                    wb = (d_bar[row, jcol]
                          + c[i, 0] * c_bar[row, jcol, 0]
                          + c[i, 1] * c_bar[row, jcol, 1]
                          + c[i, 2] * c_bar[row, jcol, 2])
                    gu += wb * w * dx
                    gv += wb * w * dy
                    g0 += w * c_bar[row, jcol, 0]
                    g1 += w * c_bar[row, jcol, 1]
                    g2 += w * c_bar[row, jcol, 2]
            x_bar[i, 0] = gu * inv_s2 * scale
            x_bar[i, 1] = -gv * inv_s2 * scale
            col_bar[i, 0] = g0
            col_bar[i, 1] = g1
            col_bar[i, 2] = g2
        return x_bar, col_bar


def _check(x, c, cfg):
    x = np.ascontiguousarray(x, dtype=np.float64)
    c = np.ascontiguousarray(c, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 2:
        raise InputError(f"splat positions must be (N, 2), got {x.shape}")
    if c.shape != (x.shape[0], 3):
        raise InputError(f"splat colors must be (N, 3), got {c.shape}")
    y_hi = cfg.y_lo + cfg.side
    scale = cfg.resolution / cfg.side
    trunc = TRUNC_SIGMAS * cfg.sigma_px
    return x, c, y_hi, scale, trunc


def splat_fwd(x, c, cfg):
    """Render N particles with colors c; returns SplatImage in the dtype of x."""
    dtype = np.asarray(x).dtype
    x, c, y_hi, scale, trunc = _check(x, c, cfg)
    fn = _splat_fwd_nb if HAVE_NUMBA else _splat_fwd_np
    dens, col = fn(x, c, cfg.resolution, float(cfg.sigma_px), trunc,
                   float(cfg.x_lo), y_hi, scale)
    if dtype.kind != "f":
        dtype = np.dtype(np.float64)
    return SplatImage(dens.astype(dtype, copy=False), col.astype(dtype, copy=False))


def splat_bwd(x, c, cfg, density_bar, color_bar):
    """Adjoint of splat_fwd: returns (x_bar, color_bar_per_particle)."""
    dtype = np.asarray(x).dtype
    x, c, y_hi, scale, trunc = _check(x, c, cfg)
    d_bar = np.ascontiguousarray(density_bar, dtype=np.float64)
    c_bar = np.ascontiguousarray(color_bar, dtype=np.float64)
    R = cfg.resolution
    if d_bar.shape != (R, R) or c_bar.shape != (R, R, 3):
        raise InputError(
            f"cotangent shapes {d_bar.shape}/{c_bar.shape} do not match R={R}")
    fn = _splat_bwd_nb if HAVE_NUMBA else _splat_bwd_np
    x_bar, col_bar = fn(x, c, R, float(cfg.sigma_px), trunc,
                        float(cfg.x_lo), y_hi, scale, d_bar, c_bar)
    if dtype.kind != "f":
        dtype = np.dtype(np.float64)
    return x_bar.astype(dtype, copy=False), col_bar.astype(dtype, copy=False)


def write_image(path, density, color):
    """Write a splat as an 8-bit image: color modulated by clipped density.

    Uses pillow when importable; otherwise falls back to a .npy dump of the
    same uint8 array so headless evaluation still leaves an artifact.
    """
    rgb = np.clip(color, 0.0, 1.0) * np.clip(density, 0.0, 1.0)[..., None]
    arr = (rgb * 255.0 + 0.5).astype(np.uint8)
    try:
        from PIL import Image
    except ImportError:
        np.save(str(path) + ".npy", arr)
        return str(path) + ".npy"
    Image.fromarray(arr, "RGB").save(path)
    return str(path)
