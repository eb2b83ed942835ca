"""Point-cloud quantization and cross-view projection.

Two fixed frames: the BEV voxel grid (volume axes [C, Z, H, W]; rows = y,
cols = x, height = z) and the range view (rows = inclination bins from the
top of the FOV down, cols = azimuth bins over [-pi, pi)). Everything here is
a pure function of its inputs; binning runs in float64 so cell assignment
does not depend on the caller's dtype.
"""

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, as_tensor, ops


def _is_pow2(n):
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class GridSpec:
    """BEV voxel grid. H, W are powers of two >= 8; Z a power of two >= 16
    so the /2, /4, /16 height pyramid stays integral."""

    x_min: float = -25.6
    x_max: float = 25.6
    y_min: float = -25.6
    y_max: float = 25.6
    z_min: float = -3.0
    z_max: float = 3.0
    h: int = 128
    w: int = 128
    z: int = 16

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min
                and self.z_max > self.z_min):
            raise ValueError("grid ranges must be nonempty")
        for name, n, lo in (("H", self.h, 8), ("W", self.w, 8), ("Z", self.z, 16)):
            if not _is_pow2(n) or n < lo:
                raise ValueError(f"grid {name} must be a power of two >= {lo}, got {n}")

    @property
    def dx(self):
        return (self.x_max - self.x_min) / self.w

    @property
    def dy(self):
        return (self.y_max - self.y_min) / self.h

    @property
    def dz(self):
        return (self.z_max - self.z_min) / self.z

    def bin_points(self, pts):
        """pts [N,>=3] -> (inside mask [N], iz, iy, ix int64 of the inside
        points). Points on the max edge fall outside."""
        p = np.asarray(pts, dtype=np.float64)
        if p.shape[0] == 0:
            e = np.zeros(0, dtype=np.int64)
            return np.zeros(0, dtype=bool), e, e, e
        ix = np.floor((p[:, 0] - self.x_min) / self.dx).astype(np.int64)
        iy = np.floor((p[:, 1] - self.y_min) / self.dy).astype(np.int64)
        iz = np.floor((p[:, 2] - self.z_min) / self.dz).astype(np.int64)
        inside = ((ix >= 0) & (ix < self.w) & (iy >= 0) & (iy < self.h)
                  & (iz >= 0) & (iz < self.z))
        return inside, iz[inside], iy[inside], ix[inside]

    def voxel_centers(self, iz, iy, ix):
        cx = self.x_min + (ix + 0.5) * self.dx
        cy = self.y_min + (iy + 0.5) * self.dy
        cz = self.z_min + (iz + 0.5) * self.dz
        return cx, cy, cz


@dataclass(frozen=True)
class RVSpec:
    """Range-view raster. Row 0 is the top of the vertical FOV."""

    h: int = 32
    w: int = 256
    fov_up_deg: float = 3.0
    fov_down_deg: float = -25.0

    def __post_init__(self):
        if self.fov_up_deg <= self.fov_down_deg:
            raise ValueError("vertical FOV must be nonempty")
        for name, n in (("Hrv", self.h), ("Wrv", self.w)):
            if not _is_pow2(n) or n < 8:
                raise ValueError(f"{name} must be a power of two >= 8, got {n}")


@dataclass
class VoxelVolume:
    features: Tensor          # [C, Z, H, W]
    occupancy: np.ndarray     # bool [Z, H, W]


@dataclass
class RVImage:
    features: np.ndarray      # f32 [5, Hrv, Wrv]: x, y, z, range, intensity
    index: np.ndarray         # int64 [Hrv, Wrv]; -1 where empty


def voxelize(pts, grid, embed=None):
    """Group points into voxels and build the initial feature volume.

    Per occupied voxel the hand-crafted feature is [mean x/y/z offset from
    the voxel center, mean intensity, log(1+count)]; `embed` (a callable
    Tensor[M,5] -> Tensor[M,C], e.g. a shared Linear) lifts it to C channels
    and participates in the gradient. Without embed the raw 5-dim stats are
    scattered as-is.
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 4)
    inside, iz, iy, ix = grid.bin_points(pts)
    p = pts[inside]
    flat = (iz * grid.h + iy) * grid.w + ix
    uniq, inv, counts = np.unique(flat, return_inverse=True, return_counts=True)

    sums = np.zeros((uniq.shape[0], 4), dtype=np.float64)
    np.add.at(sums, inv, p)
    means = sums / counts[:, None]
    uz = uniq // (grid.h * grid.w)
    uy = (uniq // grid.w) % grid.h
    ux = uniq % grid.w
    cx, cy, cz = grid.voxel_centers(uz, uy, ux)
    stats = np.stack([means[:, 0] - cx, means[:, 1] - cy, means[:, 2] - cz,
                      means[:, 3], np.log1p(counts)], axis=1).astype(np.float32)

    rows = as_tensor(stats) if embed is None else embed(as_tensor(stats))
    n_vox = grid.z * grid.h * grid.w
    vol = ops.scatter_rows(rows, uniq, n_vox)
    feat = ops.reshape(ops.transpose2d(vol), (rows.shape[1], grid.z, grid.h, grid.w))

    occ = np.zeros(n_vox, dtype=bool)
    occ[uniq] = True
    return VoxelVolume(feat, occ.reshape(grid.z, grid.h, grid.w))


def rv_pixel_coords(pts, spec):
    """Per-point range-view pixel coordinates.

    Returns (valid, row, col, range): valid is False for zero-range points
    and points outside the vertical FOV; row/col are clipped into the image
    so they are only meaningful where valid.
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 4)
    r = np.sqrt(pts[:, 0] ** 2 + pts[:, 1] ** 2 + pts[:, 2] ** 2)
    ok = r > 1e-9
    az = np.arctan2(pts[:, 1], pts[:, 0])
    incl = np.zeros_like(r)
    incl[ok] = np.arcsin(pts[ok, 2] / r[ok])

    up = np.deg2rad(spec.fov_up_deg)
    down = np.deg2rad(spec.fov_down_deg)
    col = np.floor((az + np.pi) / (2.0 * np.pi) * spec.w).astype(np.int64)
    col = np.clip(col, 0, spec.w - 1)
    row = np.floor((up - incl) / (up - down) * spec.h).astype(np.int64)
    ok &= (row >= 0) & (incl >= down) & (incl <= up)
    row = np.clip(row, 0, spec.h - 1)
    return ok, row, col, r


def project_rv(pts, spec):
    """Spherical projection to a range image; the nearest point wins each
    pixel (ties by lower point index). Zero-range points are skipped."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 4)
    feat = np.zeros((5, spec.h, spec.w), dtype=np.float32)
    index = np.full((spec.h, spec.w), -1, dtype=np.int64)
    if pts.shape[0] == 0:
        return RVImage(feat, index)

    ok, row, col, r = rv_pixel_coords(pts, spec)
    ids = np.nonzero(ok)[0]
    if ids.shape[0] == 0:
        return RVImage(feat, index)
    pix = row[ids] * spec.w + col[ids]
    order = np.lexsort((ids, r[ids], pix))
    spix = pix[order]
    heads = np.ones(order.shape[0], dtype=bool)
    heads[1:] = spix[1:] != spix[:-1]
    win_pix = spix[heads]
    win_ids = ids[order][heads]

    index.reshape(-1)[win_pix] = win_ids
    flat = feat.reshape(5, -1)
    flat[0, win_pix] = pts[win_ids, 0]
    flat[1, win_pix] = pts[win_ids, 1]
    flat[2, win_pix] = pts[win_ids, 2]
    flat[3, win_pix] = r[win_ids]
    flat[4, win_pix] = pts[win_ids, 3]
    return RVImage(feat, index)


def downsample_rv_index(index, ranges, factors=(2, 2)):
    """Reduce an RV index map by integer block factors (fy, fx).

    Within each block the pixel holding the nearest point wins (ties to the
    earlier pixel in row-major block order); all-empty blocks stay -1.
    ranges is the per-pixel point range (garbage where index is -1).
    """
    fy, fx = factors
    h, w = index.shape
    hb, wb = h // fy, w // fx
    blk = index.reshape(hb, fy, wb, fx).transpose(0, 2, 1, 3).reshape(hb, wb, fy * fx)
    rng = np.asarray(ranges, dtype=np.float64)
    rng = rng.reshape(hb, fy, wb, fx).transpose(0, 2, 1, 3).reshape(hb, wb, fy * fx)
    rng = np.where(blk < 0, np.inf, rng)
    best = rng.argmin(axis=2)
    return np.take_along_axis(blk, best[..., None], axis=2)[..., 0]


def downsample_occupancy(occ, factors):
    """Any-reduce a [Z,H,W] bool mask by integer factors (fz, fy, fx)."""
    fz, fy, fx = factors
    z, h, w = occ.shape
    return occ.reshape(z // fz, fz, h // fy, fy, w // fx, fx).any(axis=(1, 3, 5))


def average_over_height(feat, occ):
    """Mean over occupied voxels per BEV column: [C,Z,H,W] -> [C,H,W].

    occ is a bool [Z,H,W] mask at the same scale; all-empty columns yield
    zeros. Differentiable in feat.
    """
    mask = occ.astype(feat.dtype)
    counts = np.maximum(mask.sum(axis=0), 1.0)
    summed = ops.tensor_sum(feat * mask[None], axis=1)
    return summed * (1.0 / counts)[None]


def bev_collapse(feat):
    """Fold height into channels: [C,Z,H,W] -> [C*Z,H,W] (invertible stack)."""
    c, z, h, w = feat.shape
    return ops.reshape(feat, (c * z, h, w))


def bev_uncollapse(feat, z):
    c2, h, w = feat.shape
    return ops.reshape(feat, (c2 // z, z, h, w))


def voxel_to_rv(feat, occ, pts, rv_index, grid, down=(1, 1, 1), compress=None):
    """Gather per-RV-pixel voxel features: [C,Zs,Hs,Ws] -> [C,h,w].

    For each pixel of rv_index holding a point index, look up the voxel that
    contains the point at this scale (down = integer (fz, fy, fx) factors of
    the full-resolution grid) and copy its feature; empty pixels, points
    outside the grid, and unoccupied voxels give zeros. `compress` (for
    example a 1x1 conv) is applied to the gathered image when given.
    Differentiable in feat.
    """
    fz, fy, fx = down
    zs, hs, ws = grid.z // fz, grid.h // fy, grid.w // fx
    c = feat.shape[0]
    if feat.shape[1:] != (zs, hs, ws):
        raise ValueError(f"feature volume {feat.shape} does not match scale {down}")

    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 4)
    n_vox = zs * hs * ws
    # per-point flat voxel id at this scale; n_vox marks "no feature"
    pt_vox = np.full(pts.shape[0], n_vox, dtype=np.int64)
    inside, iz, iy, ix = grid.bin_points(pts)
    vz, vy, vx = iz // fz, iy // fy, ix // fx
    cand = (vz * hs + vy) * ws + vx
    occ_flat = occ.reshape(-1)
    keep = occ_flat[cand]
    tmp = np.full(cand.shape[0], n_vox, dtype=np.int64)
    tmp[keep] = cand[keep]
    pt_vox[np.nonzero(inside)[0]] = tmp

    pix_pt = rv_index.reshape(-1)
    cols = np.full(pix_pt.shape[0], n_vox, dtype=np.int64)
    valid = pix_pt >= 0
    cols[valid] = pt_vox[pix_pt[valid]]

    flat = ops.reshape(feat, (c, n_vox))
    zero_col = Tensor(np.zeros((c, 1), dtype=feat.dtype.type))
    padded = ops.concat([flat, zero_col], axis=1)
    img = ops.reshape(ops.gather_cols(padded, cols),
                      (c, rv_index.shape[0], rv_index.shape[1]))
    return img if compress is None else compress(img)


def rasterize_instances(pts, ids, grid, down=(1, 1)):
    """Majority-vote instance mask on the BEV grid at a given scale.

    ids are per-point nonnegative instance labels (0 = background). Each
    cell takes the majority label among its points, ties to the smaller
    label; nonzero winners are re-densified to {1..M} in ascending original
    order. Returns (mask [Hs,Ws] int64, original_ids [M]).
    """
    fy, fx = down
    hs, ws = grid.h // fy, grid.w // fx
    mask = np.zeros((hs, ws), dtype=np.int64)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.min(initial=0) < 0:
        raise ValueError("instance IDs must be nonnegative")
    inside, _, iy, ix = grid.bin_points(pts)
    if not inside.any():
        return mask, np.zeros(0, dtype=np.int64)
    cell = (iy // fy) * ws + (ix // fx)
    lab = ids[inside]

    pairs = cell * (lab.max() + 1) + lab
    uniq, counts = np.unique(pairs, return_counts=True)
    ucell = uniq // (lab.max() + 1)
    ulab = uniq % (lab.max() + 1)
    # winner per cell: highest count, then smallest label
    order = np.lexsort((ulab, -counts, ucell))
    heads = np.ones(order.shape[0], dtype=bool)
    sc = ucell[order]
    heads[1:] = sc[1:] != sc[:-1]
    win_cell = sc[heads]
    win_lab = ulab[order][heads]

    nz = win_lab > 0
    originals = np.unique(win_lab[nz])
    remap = {orig: i + 1 for i, orig in enumerate(originals)}
    dense = np.array([remap[v] for v in win_lab[nz]], dtype=np.int64)
    mask.reshape(-1)[win_cell[nz]] = dense
    return mask, originals
