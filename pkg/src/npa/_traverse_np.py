"""Pure-numpy fallback for the traversal kernels.

Same call signatures as the numba module. Pairs are materialized one
neighbor-cell offset at a time, in the same geometric scan order the compiled
kernels use (dz, dy, dx ascending); per-particle accumulation order therefore
matches, and every per-pair arithmetic expression mirrors the compiled
kernels' scalar trees term by term. np.add.at applies updates sequentially in
pair order, so results agree with the numba backend to the last float
(equality; signs of zeros may differ).

Both strategies route to the same implementation here: the strategies are
execution schedules, and every schedule produces the identical accumulation
sequence by construction.
"""

import numpy as np

GUARD = 1e-12

_OFFSETS_2D = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
_OFFSETS_3D = [(dz, dy, dx) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]


def _pairs_for_offset(coords, dims, offsets, counts, order_b, mode, bits, delta):
    """Pair arrays (ii, jj) for one neighbor-cell offset, per-particle order
    ascending within the cell span."""
    N, D = coords.shape
    if D == 3:
        dz, dy, dx = delta
        nc = coords + np.array([dx, dy, dz], dtype=np.int64)
    else:
        dy, dx = delta
        nc = coords + np.array([dx, dy], dtype=np.int64)
    valid = np.all((nc >= 0) & (nc < dims[:D]), axis=1)
    ii = np.nonzero(valid)[0]
    if ii.size == 0:
        return None
    ncv = nc[ii]
    if mode == 0:
        h = ncv[:, -1]
        for a in range(D - 2, -1, -1):
            h = h * dims[a] + ncv[:, a]
    else:
        h = np.zeros(ii.shape, dtype=np.int64)
        for k in range(bits):
            for a in range(D):
                h |= ((ncv[:, a] >> k) & 1) << (k * D + a)
    starts = offsets[h]
    cnts = counts[h]
    nz = cnts > 0
    ii, starts, cnts = ii[nz], starts[nz], cnts[nz]
    total = int(cnts.sum())
    if total == 0:
        return None
    reps = cnts
    ii = np.repeat(ii, reps)
    base = np.repeat(starts, reps)
    within = np.arange(total, dtype=np.int64) - np.repeat(np.cumsum(cnts) - cnts, reps)
    return ii, order_b[base + within]


def _pair_geometry(x64b, ii, jj, eps):
    D = x64b.shape[1]
    r0 = x64b[ii, 0] - x64b[jj, 0]
    r1 = x64b[ii, 1] - x64b[jj, 1]
    if D == 3:
        r2 = x64b[ii, 2] - x64b[jj, 2]
        d2 = r0 * r0 + r1 * r1 + r2 * r2
    else:
        r2 = None
        d2 = r0 * r0 + r1 * r1
    keep = d2 < eps * eps
    if not keep.all():
        ii, jj, r0, r1, d2 = ii[keep], jj[keep], r0[keep], r1[keep], d2[keep]
        if D == 3:
            r2 = r2[keep]
    return ii, jj, r0, r1, r2, d2


def _spiky_parts(d2, eps, zg, want_bco):
    d = np.sqrt(d2)
    ok = d > GUARD
    dd = np.where(ok, d, 1.0)
    u = eps - d
    a = np.where(ok, zg * u * u / dd, 0.0)
    bco = None
    if want_bco:
        e2 = eps * eps
        bco = np.where(ok & (d < eps), zg * (e2 - d2) / (dd * dd * dd), 0.0)
    return a, bco


def fwd_particle(x_bin, coords_bin, counts, offsets, dims3, mode, bits, order,
                 eps, z, zg, m, S_bin, rho_bin,
                 want_rho, want_smooth, want_grad0, want_gradrho, want_moment,
                 out_rho, out_st, out_g0, out_gr, out_M):
    B, N, D = x_bin.shape
    e2 = eps * eps
    need_rho_vals = want_smooth or want_grad0 or want_moment
    want_spiky = want_grad0 or want_gradrho or want_moment
    x64 = x_bin.astype(np.float64)
    S64 = S_bin.astype(np.float64) if (want_smooth or want_grad0) else None
    rho64 = rho_bin.astype(np.float64) if need_rho_vals else None
    deltas = _OFFSETS_3D if D == 3 else _OFFSETS_2D
    for b in range(B):
        ts = int(dims3[b, 0] * dims3[b, 1] * dims3[b, 2]) if mode == 0 else counts.shape[1]
        for delta in deltas:
            p = _pairs_for_offset(coords_bin[b], dims3[b], offsets[b], counts[b],
                                  order[b], mode, bits, delta)
            if p is None:
                continue
            ii, jj = p
            ii, jj, r0, r1, r2, d2 = _pair_geometry(x64[b], ii, jj, eps)
            if ii.size == 0:
                continue
            mrj = m / rho64[b][jj] if need_rho_vals else None
            if want_rho or want_smooth:
                tw = e2 - d2
                w = z * (tw * tw * tw)
                if want_rho:
                    np.add.at(out_rho[b], ii, m * w)
                if want_smooth:
                    coef = mrj * w
                    np.add.at(out_st[b], ii, coef[:, None] * S64[b][jj])
            if want_spiky:
                sg, _ = _spiky_parts(d2, eps, zg, False)
                wg0 = sg * r0
                wg1 = sg * r1
                wg2 = sg * r2 if D == 3 else None
                wg = np.stack([wg0, wg1, wg2], axis=1) if D == 3 else np.stack([wg0, wg1], axis=1)
                if want_grad0:
                    sd = S64[b][ii] - S64[b][jj]
                    coef = mrj[:, None] * sd
                    np.add.at(out_g0[b], ii, coef[:, :, None] * wg[:, None, :])
                if want_gradrho:
                    np.subtract.at(out_gr[b], ii, m * wg)
                if want_moment:
                    r = np.stack([r0, r1, r2], axis=1) if D == 3 else np.stack([r0, r1], axis=1)
                    cvec = mrj[:, None] * r
                    np.add.at(out_M[b], ii, cvec[:, :, None] * wg[:, None, :])


def fwd_block(x_bin, coords_bin, counts, offsets, dims3, mode, bits, order,
              eps, z, zg, m, S_bin, rho_bin, binfo, stride,
              want_rho, want_smooth, want_grad0, want_gradrho, want_moment,
              out_rho, out_st, out_g0, out_gr, out_M):
    # the block schedule produces the same accumulation sequence
    fwd_particle(x_bin, coords_bin, counts, offsets, dims3, mode, bits, order,
                 eps, z, zg, m, S_bin, rho_bin,
                 want_rho, want_smooth, want_grad0, want_gradrho, want_moment,
                 out_rho, out_st, out_g0, out_gr, out_M)


def bwd_particle(x_bin, coords_bin, counts, offsets, dims3, mode, bits, order,
                 eps, z, zg, m, S_bin, rho_bin,
                 rb, stb, g0b, grb, Mb,
                 has_rb, has_st, has_g0, has_gr, has_mb,
                 need_x, need_s, need_rho,
                 out_x, out_s, out_rho):
    B, N, D = x_bin.shape
    C = S_bin.shape[2]
    e2 = eps * eps
    need_poly = has_rb or has_st
    need_spiky = has_g0 or has_gr or has_mb
    need_rho_vals = has_st or has_g0 or has_mb
    x64 = x_bin.astype(np.float64)
    S64 = S_bin.astype(np.float64) if (has_st or has_g0) else None
    rho64 = rho_bin.astype(np.float64) if need_rho_vals else None
    deltas = _OFFSETS_3D if D == 3 else _OFFSETS_2D
    for b in range(B):
        for delta in deltas:
            p = _pairs_for_offset(coords_bin[b], dims3[b], offsets[b], counts[b],
                                  order[b], mode, bits, delta)
            if p is None:
                continue
            ii, jj = p
            ii, jj, r0, r1, r2, d2 = _pair_geometry(x64[b], ii, jj, eps)
            P = ii.size
            if P == 0:
                continue
            if need_rho_vals:
                rho_i = rho64[b][ii]
                mri = m / rho_i
                mri2 = mri / rho_i
                mrj = m / rho64[b][jj]
            w = pg0 = pg1 = pg2 = None
            if need_poly:
                tw = e2 - d2
                w = z * (tw * tw * tw)
                if need_x:
                    pgc = -6.0 * z * (tw * tw)
                    pg0 = pgc * r0
                    pg1 = pgc * r1
                    pg2 = pgc * r2 if D == 3 else None
            a = bco = wg0 = wg1 = wg2 = None
            if need_spiky:
                a, bco = _spiky_parts(d2, eps, zg, True)
                wg0 = a * r0
                wg1 = a * r1
                wg2 = a * r2 if D == 3 else None
            dotv = np.zeros(P)
            scal = np.zeros(P)
            racc = np.zeros(P)
            v0 = np.zeros(P)
            v1 = np.zeros(P)
            v2 = np.zeros(P)
            if has_st or has_g0:
                coefW = mri * w if has_st else None
                sacc = np.zeros((P, C)) if need_s else None
                for c in range(C):
                    if need_s:
                        if has_st:
                            sacc[:, c] += coefW * stb[b][jj, c]
                        if has_g0:
                            tg0 = mrj * g0b[b][ii, c, 0] + mri * g0b[b][jj, c, 0]
                            tg1 = mrj * g0b[b][ii, c, 1] + mri * g0b[b][jj, c, 1]
                            sacc[:, c] += tg0 * wg0
                            sacc[:, c] += tg1 * wg1
                            if D == 3:
                                tg2 = mrj * g0b[b][ii, c, 2] + mri * g0b[b][jj, c, 2]
                                sacc[:, c] += tg2 * wg2
                    if has_st and (need_x or need_rho):
                        if need_x:
                            scal += stb[b][ii, c] * (mrj * S64[b][jj, c])
                            scal += stb[b][jj, c] * (mri * S64[b][ii, c])
                        if need_rho:
                            dotv += stb[b][jj, c] * S64[b][ii, c]
                    if has_g0 and (need_x or need_rho):
                        sd = S64[b][ii, c] - S64[b][jj, c]
                        if need_rho:
                            gdot = g0b[b][jj, c, 0] * wg0
                            gdot = gdot + g0b[b][jj, c, 1] * wg1
                            if D == 3:
                                gdot = gdot + g0b[b][jj, c, 2] * wg2
                            racc += sd * gdot
                        if need_x:
                            tg0 = mrj * g0b[b][ii, c, 0] + mri * g0b[b][jj, c, 0]
                            tg1 = mrj * g0b[b][ii, c, 1] + mri * g0b[b][jj, c, 1]
                            v0 += sd * tg0
                            v1 += sd * tg1
                            if D == 3:
                                tg2 = mrj * g0b[b][ii, c, 2] + mri * g0b[b][jj, c, 2]
                                v2 += sd * tg2
                if need_s:
                    np.add.at(out_s[b], ii, sacc)
            if need_x:
                x0 = np.zeros(P)
                x1 = np.zeros(P)
                x2 = np.zeros(P)
                if has_rb:
                    coef = m * rb[b][ii] + m * rb[b][jj]
                    x0 += coef * pg0
                    x1 += coef * pg1
                    if D == 3:
                        x2 += coef * pg2
                if has_st:
                    x0 += scal * pg0
                    x1 += scal * pg1
                    if D == 3:
                        x2 += scal * pg2
                if has_g0:
                    sv = r0 * v0 + r1 * v1 + r2 * v2 if D == 3 else r0 * v0 + r1 * v1
                    bsv = bco * sv
                    x0 += a * v0 - bsv * r0
                    x1 += a * v1 - bsv * r1
                    if D == 3:
                        x2 += a * v2 - bsv * r2
                if has_gr:
                    u0 = m * grb[b][jj, 0] - m * grb[b][ii, 0]
                    u1 = m * grb[b][jj, 1] - m * grb[b][ii, 1]
                    u2 = m * grb[b][jj, 2] - m * grb[b][ii, 2] if D == 3 else None
                    sv = r0 * u0 + r1 * u1 + r2 * u2 if D == 3 else r0 * u0 + r1 * u1
                    bsv = bco * sv
                    x0 += a * u0 - bsv * r0
                    x1 += a * u1 - bsv * r1
                    if D == 3:
                        x2 += a * u2 - bsv * r2
                if has_mb:
                    c00 = mrj * Mb[b][ii, 0, 0] + mri * Mb[b][jj, 0, 0]
                    c01 = mrj * Mb[b][ii, 0, 1] + mri * Mb[b][jj, 0, 1]
                    c10 = mrj * Mb[b][ii, 1, 0] + mri * Mb[b][jj, 1, 0]
                    c11 = mrj * Mb[b][ii, 1, 1] + mri * Mb[b][jj, 1, 1]
                    if D == 3:
                        c02 = mrj * Mb[b][ii, 0, 2] + mri * Mb[b][jj, 0, 2]
                        c12 = mrj * Mb[b][ii, 1, 2] + mri * Mb[b][jj, 1, 2]
                        c20 = mrj * Mb[b][ii, 2, 0] + mri * Mb[b][jj, 2, 0]
                        c21 = mrj * Mb[b][ii, 2, 1] + mri * Mb[b][jj, 2, 1]
                        c22 = mrj * Mb[b][ii, 2, 2] + mri * Mb[b][jj, 2, 2]
                        t0 = c00 * wg0 + c01 * wg1 + c02 * wg2
                        t1 = c10 * wg0 + c11 * wg1 + c12 * wg2
                        t2 = c20 * wg0 + c21 * wg1 + c22 * wg2
                        m0 = c00 * r0 + c10 * r1 + c20 * r2
                        m1 = c01 * r0 + c11 * r1 + c21 * r2
                        m2 = c02 * r0 + c12 * r1 + c22 * r2
                        sv = r0 * m0 + r1 * m1 + r2 * m2
                        bsv = bco * sv
                        x0 += t0 + (a * m0 - bsv * r0)
                        x1 += t1 + (a * m1 - bsv * r1)
                        x2 += t2 + (a * m2 - bsv * r2)
                    else:
                        t0 = c00 * wg0 + c01 * wg1
                        t1 = c10 * wg0 + c11 * wg1
                        m0 = c00 * r0 + c10 * r1
                        m1 = c01 * r0 + c11 * r1
                        sv = r0 * m0 + r1 * m1
                        bsv = bco * sv
                        x0 += t0 + (a * m0 - bsv * r0)
                        x1 += t1 + (a * m1 - bsv * r1)
                xt = np.stack([x0, x1, x2], axis=1) if D == 3 else np.stack([x0, x1], axis=1)
                np.add.at(out_x[b], ii, xt)
            if need_rho:
                rterm = np.zeros(P)
                if has_st:
                    rterm -= mri2 * w * dotv
                if has_g0:
                    rterm -= mri2 * racc
                if has_mb:
                    fro = Mb[b][jj, 0, 0] * (r0 * wg0)
                    fro = fro + Mb[b][jj, 0, 1] * (r0 * wg1)
                    fro = fro + Mb[b][jj, 1, 0] * (r1 * wg0)
                    fro = fro + Mb[b][jj, 1, 1] * (r1 * wg1)
                    if D == 3:
                        fro = fro + Mb[b][jj, 0, 2] * (r0 * wg2)
                        fro = fro + Mb[b][jj, 1, 2] * (r1 * wg2)
                        fro = fro + Mb[b][jj, 2, 0] * (r2 * wg0)
                        fro = fro + Mb[b][jj, 2, 1] * (r2 * wg1)
                        fro = fro + Mb[b][jj, 2, 2] * (r2 * wg2)
                    rterm -= mri2 * fro
                np.add.at(out_rho[b], ii, rterm)


def bwd_block(x_bin, coords_bin, counts, offsets, dims3, mode, bits, order,
              eps, z, zg, m, S_bin, rho_bin,
              rb, stb, g0b, grb, Mb, binfo, stride,
              has_rb, has_st, has_g0, has_gr, has_mb,
              need_x, need_s, need_rho,
              out_x, out_s, out_rho):
    bwd_particle(x_bin, coords_bin, counts, offsets, dims3, mode, bits, order,
                 eps, z, zg, m, S_bin, rho_bin,
                 rb, stb, g0b, grb, Mb,
                 has_rb, has_st, has_g0, has_gr, has_mb,
                 need_x, need_s, need_rho,
                 out_x, out_s, out_rho)
