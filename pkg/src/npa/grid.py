"""Uniform hash-grid binning and neighbor traversal.

Particles are binned into cells of side eps (the kernel support radius), so
the neighbors of a particle are found in the 3^D cells around its own. The
grid is rebuilt from the particle bounding box every step: the origin is the
per-batch-element minimum corner, integer cell coordinates are nonnegative,
and every cell owns a real table slot (no modular hashing, no collisions).

Layout per batch element, after a stable counting sort by cell hash:

    cell_count[h]   particles in cell h
    cell_offset[h]  exclusive prefix sum; cell h's particles occupy binned
                    indices [cell_offset[h], cell_offset[h]+cell_count[h])
    src[k]          original index of binned particle k
    perm[i]         binned index of original particle i  (perm[src[k]] = k)
    x_bin           positions gathered into binned order

Within a cell the sort is stable: ascending original index. A separate
canonical ordering (position-lexicographic within each cell) is also built;
operators use it when bitwise reproducibility across hashings and particle
permutations matters.

Two cell hashings are supported. row_major packs coordinates x-fastest, so
the three x-adjacent cells of a neighbor row sit in one contiguous binned
span; morton interleaves coordinate bits. Both produce the same neighbor
sets, and traversal scans cells in geometric order (dz, dy, dx ascending) so
downstream accumulation order does not depend on the hashing.
"""

import numpy as np

from .errors import InputError

MAX_TABLE = 1 << 26

HASH_ROW_MAJOR = 0
HASH_MORTON = 1

_MODE_CODE = {"row_major": HASH_ROW_MAJOR, "morton": HASH_MORTON}


def _spread_bits(v, bits, dim):
    """Insert dim-1 zero bits between the low `bits` bits of each element."""
    out = np.zeros_like(v)
    for b in range(bits):
        out |= ((v >> b) & 1) << (b * dim)
    return out


def morton_encode(coords, bits):
    """Interleave the low `bits` bits of integer coordinates, x least significant."""
    coords = np.asarray(coords, dtype=np.int64)
    dim = coords.shape[-1]
    h = np.zeros(coords.shape[:-1], dtype=np.int64)
    for a in range(dim):
        h |= _spread_bits(coords[..., a], bits, dim) << a
    return h


def row_major_encode(coords, dims):
    """Pack coordinates with x fastest: h = (cz*ny + cy)*nx + cx."""
    coords = np.asarray(coords, dtype=np.int64)
    h = coords[..., -1]
    for a in range(coords.shape[-1] - 2, -1, -1):
        h = h * dims[a] + coords[..., a]
    return h


class HashGrid:
    """Immutable binned snapshot of one batch of particle positions."""

    def __init__(self, dim, eps, mode, positions, origin, dims, table_size,
                 counts, offsets, src, perm, x_bin, coords_bin, canon, bits):
        self.dim = dim
        self.eps = eps
        self.mode = mode
        self.mode_code = _MODE_CODE[mode]
        self.positions = positions
        self.B, self.N = positions.shape[0], positions.shape[1]
        self.origin = origin
        self.dims = dims
        self.table_size = table_size
        self.counts = counts
        self.offsets = offsets
        self.src = src
        self.perm = perm
        self.x_bin = x_bin
        self.coords_bin = coords_bin
        self.canon = canon
        self.bits = bits

    # cell_count_table / cell_offset_table under their layout names
    @property
    def cell_count_table(self):
        return self.counts

    @property
    def cell_offset_table(self):
        return self.offsets

    def bin(self, a):
        """Gather a per-particle array (B, N, ...) into binned order."""
        idx = self.src.reshape(self.src.shape + (1,) * (a.ndim - 2))
        return np.take_along_axis(a, np.broadcast_to(idx, self.src.shape + a.shape[2:]), axis=1)

    def unbin(self, a_bin):
        """Scatter a binned per-particle array back to original order."""
        out = np.empty_like(a_bin)
        for b in range(self.B):
            out[b][self.src[b]] = a_bin[b]
        return out


def build_grid(positions, eps, hashing_mode="row_major"):
    """Bin particles into cells of side eps.

    positions: (N, D) or (B, N, D), D in {2, 3}. Cell coordinates are
    floor((x - origin)/eps) computed in float64; a particle exactly on a cell
    boundary belongs to the higher cell. Raises InputError on non-finite
    positions, identifying the offending particle.
    """
    positions = np.asarray(positions)
    if positions.ndim == 2:
        positions = positions[None]
    if positions.ndim != 3 or positions.shape[-1] not in (2, 3):
        raise InputError(f"positions must be (B, N, D) with D in {{2,3}}, got {positions.shape}")
    if hashing_mode not in _MODE_CODE:
        raise InputError(f"hashing_mode must be 'morton' or 'row_major', got {hashing_mode!r}")
    eps = float(eps)
    if not (eps > 0.0):
        raise InputError(f"eps must be positive, got {eps}")
    bad = ~np.isfinite(positions)
    if bad.any():
        b, i, _ = np.argwhere(bad)[0]
        raise InputError(f"non-finite position at batch {b}, particle {i}")

    B, N, D = positions.shape
    xf = positions.astype(np.float64, copy=False)
    origin = xf.min(axis=1)
    coords = np.floor((xf - origin[:, None, :]) / eps).astype(np.int64)
    dims = coords.max(axis=1) + 1

    table_size = np.empty(B, dtype=np.int64)
    hashes = np.empty((B, N), dtype=np.int64)
    bits = 0
    if hashing_mode == "morton":
        bits = max(1, int(dims.max() - 1).bit_length())
        ts = 1 << (D * bits)
        if ts > MAX_TABLE:
            raise InputError(
                f"grid table would need {ts} cells (> {MAX_TABLE}); "
                f"positions too spread out for eps={eps}")
        table_size[:] = ts
        for b in range(B):
            hashes[b] = morton_encode(coords[b], bits)
    else:
        for b in range(B):
            ts = 1
            for a in range(D):
                ts *= int(dims[b, a])
            if ts > MAX_TABLE:
                raise InputError(
                    f"grid table would need {ts} cells (> {MAX_TABLE}); "
                    f"positions too spread out for eps={eps}")
            table_size[b] = ts
            hashes[b] = row_major_encode(coords[b], dims[b])

    Hmax = int(table_size.max())
    counts = np.zeros((B, Hmax), dtype=np.int64)
    offsets = np.full((B, Hmax + 1), N, dtype=np.int64)
    src = np.empty((B, N), dtype=np.int64)
    perm = np.empty((B, N), dtype=np.int64)
    canon = np.empty((B, N), dtype=np.int64)
    x_bin = np.empty_like(positions)
    coords_bin = np.empty((B, N, D), dtype=np.int64)

    arangeN = np.arange(N, dtype=np.int64)
    for b in range(B):
        ts = int(table_size[b])
        order = np.argsort(hashes[b], kind="stable")
        src[b] = order
        perm[b][order] = arangeN
        counts[b, :ts] = np.bincount(hashes[b], minlength=ts)
        offsets[b, 0] = 0
        np.cumsum(counts[b, :ts], out=offsets[b, 1:ts + 1])
        x_bin[b] = positions[b][order]
        coords_bin[b] = coords[b][order]
        # canonical within-cell order: sort by position lexicographically,
        # original index breaks exact ties; cells stay grouped because the
        # binned hash sequence is already nondecreasing
        h_bin = hashes[b][order]
        keys = [order] + [xf[b][order][:, a] for a in range(D - 1, -1, -1)] + [h_bin]
        canon[b] = np.lexsort(keys)

    return HashGrid(D, eps, hashing_mode, positions, origin, dims, table_size,
                    counts, offsets, src, perm, x_bin, coords_bin, canon, bits)


def _cell_hash(grid, b, c):
    if grid.mode == "morton":
        return int(morton_encode(np.asarray(c, dtype=np.int64), grid.bits))
    return int(row_major_encode(np.asarray(c, dtype=np.int64), grid.dims[b]))


def neighbor_cell_spans(grid, b, coord):
    """Yield (start, end) binned spans of the 3^D cells around integer coord,
    scanning in geometric order (dz, dy, dx ascending), skipping coordinates
    outside the grid extent. Empty cells yield empty spans."""
    D = grid.dim
    dims = grid.dims[b]
    lo_z, hi_z = (-1, 2) if D == 3 else (0, 1)
    for dz in range(lo_z, hi_z):
        if D == 3:
            cz = coord[2] + dz
            if cz < 0 or cz >= dims[2]:
                continue
        for dy in range(-1, 2):
            cy = coord[1] + dy
            if cy < 0 or cy >= dims[1]:
                continue
            for dx in range(-1, 2):
                cx = coord[0] + dx
                if cx < 0 or cx >= dims[0]:
                    continue
                c = (cx, cy, cz) if D == 3 else (cx, cy)
                h = _cell_hash(grid, b, c)
                start = int(grid.offsets[b, h])
                yield start, start + int(grid.counts[b, h])


def for_each_neighbor(grid, i, visit, b=0):
    """Call visit(j, r_ij, d) for every binned particle j within eps of binned
    particle i (strict inequality), self included. Deterministic order: cells
    in geometric scan order, ascending binned index within each cell."""
    xi = grid.x_bin[b, i].astype(np.float64)
    e2 = grid.eps * grid.eps
    for start, end in neighbor_cell_spans(grid, b, grid.coords_bin[b, i]):
        for j in range(start, end):
            r = xi - grid.x_bin[b, j].astype(np.float64)
            d2 = float(r @ r)
            if d2 < e2:
                visit(j, r, np.sqrt(d2))


def brute_force_neighbors(positions, eps, i):
    """All-pairs reference: indices j with ||x_i - x_j|| < eps, self included."""
    positions = np.asarray(positions, dtype=np.float64)
    d2 = ((positions - positions[i]) ** 2).sum(axis=1)
    return set(np.nonzero(d2 < eps * eps)[0].tolist())


def plan_blocks(grid, max_block_occupancy=128):
    """Split every nonempty cell's binned span into chunks of at most
    max_block_occupancy particles. Returns int64 arrays (batch, cell_hash,
    start, length), one row per block; start is an absolute binned index."""
    if max_block_occupancy < 1:
        raise InputError("max_block_occupancy must be >= 1")
    rows = []
    for b in range(grid.B):
        ts = int(grid.table_size[b])
        nonempty = np.nonzero(grid.counts[b, :ts])[0]
        for h in nonempty:
            start = int(grid.offsets[b, h])
            n = int(grid.counts[b, h])
            for s in range(0, n, max_block_occupancy):
                rows.append((b, int(h), start + s, min(max_block_occupancy, n - s)))
    if not rows:
        return np.zeros((0, 4), dtype=np.int64)
    return np.asarray(rows, dtype=np.int64)
