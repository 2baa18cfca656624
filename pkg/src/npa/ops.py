"""Differentiable SPH operators over a hash grid.

Forward operators (per particle i, neighbors j within eps, uniform mass m,
gather convention r_ij = x_i - x_j):

    density    rho_i = sum_j m * W(r_ij)
    smooth     st_i  = sum_j (m/rho_j) S_j W(r_ij)
    grad0      G_i   = sum_j (m/rho_j)(S_i - S_j) (x) dW(r_ij)      (C x D)
    grad_rho   g_i   = -sum_j m dW(r_ij)                            (D)
    moment     M_i   = sum_j (m/rho_j) r_ij dW(r_ij)^T              (D x D)

with W = poly6 and dW = spiky gradient. Every operator has a hand-derived
reverse-mode adjoint accumulated as a per-particle gather, so backward passes
are as parallel as forwards and need no auxiliary storage beyond (positions,
states, rho) themselves.

Execution is dispatched over a backend (numba or the numpy mirror, chosen by
NPA_BACKEND or per call), a strategy ('particle' work items or 'block' work
items with staged neighbor rows), and an accumulation order. canonical=True
(default) uses the grid's position-sorted within-cell order: results are then
equal across strategies, hashings, thread counts, and particle input order.
canonical=False uses raw binned order, which still agrees across strategies
and hashings but tracks the input order of coincident particles.
"""

from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import InputError
from .grid import plan_blocks

if backend.HAVE_NUMBA:
    from . import _traverse_nb as _nb
else:
    _nb = None
from . import _traverse_np as _npimpl

BLOCK_SIZE = 128
STRIDE = 128
DET_THRESHOLD = 1e-3
LOG_SCALE_ETA = 1e-8

_D1 = np.zeros((1, 1))
_D2 = np.zeros((1, 1, 1))
_D3 = np.zeros((1, 1, 1, 1))


@dataclass
class PerceptionBuffers:
    rho: np.ndarray                 # (B, N)
    s_tilde: np.ndarray             # (B, N, C)
    grad0: np.ndarray               # (B, N, C, D)
    grad1: np.ndarray               # (B, N, C, D)
    grad_rho: np.ndarray            # (B, N, D)
    moment: np.ndarray              # (B, N, D, D)
    correction_applied: np.ndarray  # (B, N) bool


@dataclass
class AdjointBuffers:
    x_bar: np.ndarray
    s_bar: np.ndarray
    rho_bar: np.ndarray


def _impl(name):
    if name is None:
        name = backend.BACKEND
    if name == "numba":
        if _nb is None:
            raise InputError("numba backend requested but numba is unavailable")
        return _nb
    if name == "numpy":
        return _npimpl
    raise InputError(f"backend must be 'numba' or 'numpy', got {name!r}")


def _tables(grid, canonical):
    dims3 = getattr(grid, "_dims3", None)
    if dims3 is None:
        dims3 = np.ones((grid.B, 3), dtype=np.int64)
        dims3[:, : grid.dim] = grid.dims
        grid._dims3 = dims3
    if canonical:
        return dims3, grid.canon
    ident = getattr(grid, "_ident", None)
    if ident is None:
        ident = np.ascontiguousarray(
            np.broadcast_to(np.arange(grid.N, dtype=np.int64), (grid.B, grid.N)))
        grid._ident = ident
    return dims3, ident


def _block_info(grid, block_size):
    cache = getattr(grid, "_blocks", None)
    if cache is None:
        cache = {}
        grid._blocks = cache
    ext = cache.get(block_size)
    if ext is None:
        raw = plan_blocks(grid, block_size)
        ext = np.zeros((raw.shape[0], 7), dtype=np.int64)
        if raw.shape[0]:
            ext[:, :4] = raw
            ext[:, 4 : 4 + grid.dim] = grid.coords_bin[raw[:, 0], raw[:, 2]]
        cache[block_size] = ext
    return ext


def _as_batch(grid, a, nd, name, trail=None):
    """Promote (N, ...) to (B, N, ...) for B == 1 and validate the shape.
    Shape errors must be caught here: the compiled kernels do not bounds-check."""
    a = np.ascontiguousarray(a)
    if a.ndim == nd - 1 and grid.B == 1:
        a = a[None]
    if a.ndim != nd or a.shape[:2] != (grid.B, grid.N):
        raise InputError(
            f"{name} must be ({grid.B}, {grid.N}, ...) matching the grid, got {a.shape}")
    if trail is not None and a.shape[2:] != trail:
        raise InputError(f"{name} trailing dims must be {trail}, got {a.shape[2:]}")
    return a


def _bin_f64(grid, a):
    return grid.bin(np.ascontiguousarray(a, dtype=np.float64))


def _finish(grid, out, dtype):
    return grid.unbin(out).astype(dtype, copy=False)


def _dispatch_fwd(grid, S, rho, mass, wants, strategy, canonical, backend_name,
                  block_size, stride):
    impl = _impl(backend_name)
    dims3, order = _tables(grid, canonical)
    from .kernels import KernelParams
    kp = KernelParams(grid.dim, grid.eps)
    B, N, D = grid.B, grid.N, grid.dim
    w_rho, w_st, w_g0, w_gr, w_M = wants
    S_bin = grid.bin(_as_batch(grid, S, 3, "S")) if S is not None else _D2
    rho_bin = grid.bin(_as_batch(grid, rho, 2, "rho")) if rho is not None else _D1
    C = S_bin.shape[2]
    out_rho = np.zeros((B, N)) if w_rho else _D1
    out_st = np.zeros((B, N, C)) if w_st else _D2
    out_g0 = np.zeros((B, N, C, D)) if w_g0 else _D3
    out_gr = np.zeros((B, N, D)) if w_gr else _D2
    out_M = np.zeros((B, N, D, D)) if w_M else _D3
    args = (grid.x_bin, grid.coords_bin, grid.counts, grid.offsets, dims3,
            grid.mode_code, grid.bits, order, grid.eps, kp.z, kp.zg, float(mass),
            S_bin, rho_bin)
    outs = (out_rho, out_st, out_g0, out_gr, out_M)
    if strategy == "particle":
        impl.fwd_particle(*args, w_rho, w_st, w_g0, w_gr, w_M, *outs)
    elif strategy == "block":
        binfo = _block_info(grid, block_size)
        impl.fwd_block(*args, binfo, stride, w_rho, w_st, w_g0, w_gr, w_M, *outs)
    else:
        raise InputError(f"strategy must be 'particle' or 'block', got {strategy!r}")
    return outs


def _dispatch_bwd(grid, S, rho, mass, cots, needs, strategy, canonical,
                  backend_name, block_size, stride):
    impl = _impl(backend_name)
    dims3, order = _tables(grid, canonical)
    from .kernels import KernelParams
    kp = KernelParams(grid.dim, grid.eps)
    B, N, D = grid.B, grid.N, grid.dim
    rb, stb, g0b, grb, Mb = cots
    need_x, need_s, need_rho = needs
    S_bin = grid.bin(_as_batch(grid, S, 3, "S")) if S is not None else _D2
    rho_bin = grid.bin(_as_batch(grid, rho, 2, "rho")) if rho is not None else _D1
    C = S_bin.shape[2]
    has = tuple(c is not None for c in cots)
    rb_b = _bin_f64(grid, _as_batch(grid, rb, 2, "rho_bar")) if rb is not None else _D1
    stb_b = _bin_f64(grid, _as_batch(grid, stb, 3, "st_bar", (C,))) if stb is not None else _D2
    g0b_b = _bin_f64(grid, _as_batch(grid, g0b, 4, "g_bar", (C, D))) if g0b is not None else _D3
    grb_b = _bin_f64(grid, _as_batch(grid, grb, 3, "g_bar", (D,))) if grb is not None else _D2
    Mb_b = _bin_f64(grid, _as_batch(grid, Mb, 4, "M_bar", (D, D))) if Mb is not None else _D3
    out_x = np.zeros((B, N, D)) if need_x else _D2
    out_s = np.zeros((B, N, C)) if need_s else _D2
    out_rho = np.zeros((B, N)) if need_rho else _D1
    args = (grid.x_bin, grid.coords_bin, grid.counts, grid.offsets, dims3,
            grid.mode_code, grid.bits, order, grid.eps, kp.z, kp.zg, float(mass),
            S_bin, rho_bin, rb_b, stb_b, g0b_b, grb_b, Mb_b)
    if strategy == "particle":
        impl.bwd_particle(*args, *has, need_x, need_s, need_rho,
                          out_x, out_s, out_rho)
    elif strategy == "block":
        binfo = _block_info(grid, block_size)
        impl.bwd_block(*args, binfo, stride, *has, need_x, need_s, need_rho,
                       out_x, out_s, out_rho)
    else:
        raise InputError(f"strategy must be 'particle' or 'block', got {strategy!r}")
    return out_x, out_s, out_rho


def density(grid, mass, strategy="particle", canonical=True, backend=None,
            block_size=BLOCK_SIZE, stride=STRIDE):
    """Per-particle density, original particle order, dtype of the positions."""
    outs = _dispatch_fwd(grid, None, None, mass, (True, False, False, False, False),
                         strategy, canonical, backend, block_size, stride)
    return _finish(grid, outs[0], grid.positions.dtype)


def smooth(grid, S, rho, mass, strategy="particle", canonical=True, backend=None,
           block_size=BLOCK_SIZE, stride=STRIDE):
    """Density-normalized kernel average of the state field, self included."""
    outs = _dispatch_fwd(grid, S, rho, mass, (False, True, False, False, False),
                         strategy, canonical, backend, block_size, stride)
    return _finish(grid, outs[1], grid.positions.dtype)


def grad0(grid, S, rho, mass, strategy="particle", canonical=True, backend=None,
          block_size=BLOCK_SIZE, stride=STRIDE):
    """Difference-form state gradient, (B, N, C, D); +a on a linear field a.x."""
    outs = _dispatch_fwd(grid, S, rho, mass, (False, False, True, False, False),
                         strategy, canonical, backend, block_size, stride)
    return _finish(grid, outs[2], grid.positions.dtype)


def density_grad(grid, mass, strategy="particle", canonical=True, backend=None,
                 block_size=BLOCK_SIZE, stride=STRIDE):
    outs = _dispatch_fwd(grid, None, None, mass, (False, False, False, True, False),
                         strategy, canonical, backend, block_size, stride)
    return _finish(grid, outs[3], grid.positions.dtype)


def moment(grid, rho, mass, strategy="particle", canonical=True, backend=None,
           block_size=BLOCK_SIZE, stride=STRIDE):
    outs = _dispatch_fwd(grid, None, rho, mass, (False, False, False, False, True),
                         strategy, canonical, backend, block_size, stride)
    return _finish(grid, outs[4], grid.positions.dtype)


def density_bwd(grid, mass, rho_bar, strategy="particle", canonical=True,
                backend=None, block_size=BLOCK_SIZE, stride=STRIDE):
    """x_bar_i = sum_j m(rho_bar_i + rho_bar_j) poly6_grad(r_ij)."""
    out_x, _, _ = _dispatch_bwd(grid, None, None, mass,
                                (rho_bar, None, None, None, None),
                                (True, False, False),
                                strategy, canonical, backend, block_size, stride)
    return _finish(grid, out_x, grid.positions.dtype)


def smooth_bwd(grid, S, rho, mass, st_bar, strategy="particle", canonical=True,
               backend=None, block_size=BLOCK_SIZE, stride=STRIDE):
    """Returns (s_bar, rho_bar, x_bar); rho_bar still needs the density chain."""
    out_x, out_s, out_rho = _dispatch_bwd(grid, S, rho, mass,
                                          (None, st_bar, None, None, None),
                                          (True, True, True),
                                          strategy, canonical, backend, block_size, stride)
    dt = grid.positions.dtype
    return (_finish(grid, out_s, dt), _finish(grid, out_rho, dt),
            _finish(grid, out_x, dt))


def grad0_bwd(grid, S, rho, mass, g_bar, strategy="particle", canonical=True,
              backend=None, block_size=BLOCK_SIZE, stride=STRIDE):
    out_x, out_s, out_rho = _dispatch_bwd(grid, S, rho, mass,
                                          (None, None, g_bar, None, None),
                                          (True, True, True),
                                          strategy, canonical, backend, block_size, stride)
    dt = grid.positions.dtype
    return (_finish(grid, out_s, dt), _finish(grid, out_rho, dt),
            _finish(grid, out_x, dt))


def density_grad_bwd(grid, mass, g_bar, strategy="particle", canonical=True,
                     backend=None, block_size=BLOCK_SIZE, stride=STRIDE):
    out_x, _, _ = _dispatch_bwd(grid, None, None, mass,
                                (None, None, None, g_bar, None),
                                (True, False, False),
                                strategy, canonical, backend, block_size, stride)
    return _finish(grid, out_x, grid.positions.dtype)


def moment_bwd(grid, rho, mass, M_bar, strategy="particle", canonical=True,
               backend=None, block_size=BLOCK_SIZE, stride=STRIDE):
    out_x, _, out_rho = _dispatch_bwd(grid, None, rho, mass,
                                      (None, None, None, None, M_bar),
                                      (True, False, True),
                                      strategy, canonical, backend, block_size, stride)
    dt = grid.positions.dtype
    return _finish(grid, out_rho, dt), _finish(grid, out_x, dt)


def perception_s_bar(grid, S, rho, mass, st_bar, g0_bar, strategy="particle",
                     canonical=True, backend=None, block_size=BLOCK_SIZE,
                     stride=STRIDE):
    """Fused state adjoint of the training perception path: the smoothing and
    grad0 cotangents land on S in one traversal. Positions are held fixed by
    the update rule, so no x or rho adjoints are produced here."""
    impl = _impl(backend)
    if strategy == "particle" and hasattr(impl, "bwd_sbar"):
        # BPTT calls this once per step; the dedicated kernel takes the
        # gradient cotangent as contiguous per-component planes and agrees
        # with the generic path to the add
        dims3, order = _tables(grid, canonical)
        from .kernels import KernelParams
        kp = KernelParams(grid.dim, grid.eps)
        B, N, D = grid.B, grid.N, grid.dim
        stb = _as_batch(grid, st_bar, 3, "st_bar")
        C = stb.shape[2]
        g0b = _bin_f64(grid, _as_batch(grid, g0_bar, 4, "g_bar", (C, D)))
        out_s = np.zeros((B, N, C))
        impl.bwd_sbar(grid.x_bin, grid.coords_bin, grid.counts, grid.offsets,
                      dims3, grid.mode_code, grid.bits, order, grid.eps,
                      kp.z, kp.zg, float(mass),
                      grid.bin(_as_batch(grid, rho, 2, "rho")),
                      _bin_f64(grid, stb),
                      np.ascontiguousarray(g0b[..., 0]),
                      np.ascontiguousarray(g0b[..., 1]),
                      np.ascontiguousarray(g0b[..., 2]) if D == 3 else _D2,
                      out_s)
        return _finish(grid, out_s, grid.positions.dtype)
    _, out_s, _ = _dispatch_bwd(grid, S, rho, mass,
                                (None, st_bar, g0_bar, None, None),
                                (False, True, False),
                                strategy, canonical, backend, block_size, stride)
    return _finish(grid, out_s, grid.positions.dtype)


def _det_inv(M):
    """Determinant and adjugate-based inverse for stacked 2x2 / 3x3 matrices."""
    D = M.shape[-1]
    if D == 2:
        det = M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0]
        adj = np.empty_like(M)
        adj[..., 0, 0] = M[..., 1, 1]
        adj[..., 0, 1] = -M[..., 0, 1]
        adj[..., 1, 0] = -M[..., 1, 0]
        adj[..., 1, 1] = M[..., 0, 0]
    else:
        a, b, c = M[..., 0, 0], M[..., 0, 1], M[..., 0, 2]
        d, e, f = M[..., 1, 0], M[..., 1, 1], M[..., 1, 2]
        g, h, i = M[..., 2, 0], M[..., 2, 1], M[..., 2, 2]
        det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)
        adj = np.empty_like(M)
        adj[..., 0, 0] = e * i - f * h
        adj[..., 0, 1] = c * h - b * i
        adj[..., 0, 2] = b * f - c * e
        adj[..., 1, 0] = f * g - d * i
        adj[..., 1, 1] = a * i - c * g
        adj[..., 1, 2] = c * d - a * f
        adj[..., 2, 0] = d * h - e * g
        adj[..., 2, 1] = b * g - a * h
        adj[..., 2, 2] = a * e - b * d
    return det, adj


def corrected_gradient(g0, M, threshold=DET_THRESHOLD):
    """First-order corrected gradient: rows of grad0 times M^-1 wherever
    det(M) >= threshold, grad0 unchanged elsewhere. M is dimensionless, so the
    determinant test is scale-free as is. Returns (grad1, applied_mask).

    The backward pass is the straight-through identity: cotangents of grad1
    are handed to grad0 unmodified. The correction sharpens the forward
    estimate (exact for locally linear fields) while the gradient keeps the
    uncorrected, better-conditioned path.
    """
    M64 = M.astype(np.float64)
    g64 = g0.astype(np.float64)
    det, adj = _det_inv(M64)
    applied = det >= threshold
    safe = np.where(applied, det, 1.0)
    inv = adj / safe[..., None, None]
    # row-times-matrix contraction spelled out (faster than einsum here)
    g1 = g64[..., 0:1] * inv[..., None, 0, :] + g64[..., 1:2] * inv[..., None, 1, :]
    if M.shape[-1] == 3:
        g1 += g64[..., 2:3] * inv[..., None, 2, :]
    g1 = np.where(applied[..., None, None], g1, g64)
    return g1.astype(g0.dtype, copy=False), applied


def corrected_gradient_bwd(g1_bar):
    """Straight-through: the grad0 cotangent is the grad1 cotangent."""
    return g1_bar


def _rowdot(a, b):
    # explicit small-row dot; einsum's dispatch overhead dominates at D=2/3
    if a.shape[-1] == 2:
        return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1]
    if a.shape[-1] == 3:
        return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]
    return np.einsum("...i,...i->...", a, b)


def log_scale(v, eta=LOG_SCALE_ETA):
    """Compress vector magnitudes: v -> log(1+|v|) v/(|v|+eta), per row."""
    v64 = np.asarray(v, dtype=np.float64)
    n = np.sqrt(_rowdot(v64, v64))
    f = np.log1p(n) / (n + eta)
    out = f[..., None] * v64
    return out.astype(np.asarray(v).dtype, copy=False)


def log_scale_bwd(v, y_bar, eta=LOG_SCALE_ETA):
    """Adjoint of log_scale at input v given output cotangent y_bar.

    With a(n) = log(1+n)/(n+eta), the Jacobian is a I + (a'/n) v v^T, and
    a'(n) = ((n+eta)/(1+n) - log(1+n)) / (n+eta)^2. The limit at n -> 0 is
    handled by zeroing the rank-one term (a' -> 0 there as well).
    """
    v64 = np.asarray(v, dtype=np.float64)
    y64 = np.asarray(y_bar, dtype=np.float64)
    n = np.sqrt(_rowdot(v64, v64))
    a = np.log1p(n) / (n + eta)
    da = ((n + eta) / (1.0 + n) - np.log1p(n)) / ((n + eta) * (n + eta))
    inv_n = np.where(n > 1e-12, 1.0 / np.where(n > 1e-12, n, 1.0), 0.0)
    vy = _rowdot(v64, y64)
    out = a[..., None] * y64 + (da * inv_n * vy)[..., None] * v64
    return out.astype(np.asarray(y_bar).dtype, copy=False)


def perception(grid, S, mass, strategy="particle", canonical=True, backend=None,
               block_size=BLOCK_SIZE, stride=STRIDE, det_threshold=DET_THRESHOLD):
    """All forward operators fused into two traversals (density, then the
    rho-dependent ones), plus the corrected gradient. Returns PerceptionBuffers
    in original particle order."""
    dt = grid.positions.dtype
    outs = _dispatch_fwd(grid, None, None, mass, (True, False, False, False, False),
                         strategy, canonical, backend, block_size, stride)
    rho = _finish(grid, outs[0], dt)
    outs = _dispatch_fwd(grid, S, rho, mass, (False, True, True, True, True),
                         strategy, canonical, backend, block_size, stride)
    s_tilde = _finish(grid, outs[1], dt)
    g0 = _finish(grid, outs[2], dt)
    gr = _finish(grid, outs[3], dt)
    M = _finish(grid, outs[4], dt)
    g1, applied = corrected_gradient(g0, M, det_threshold)
    return PerceptionBuffers(rho, s_tilde, g0, g1, gr, M, applied)
