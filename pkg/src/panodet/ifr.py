"""Instance feature retrieval: per-instance codes painted onto a coarse map.

Given BEV instance masks at two pyramid scales plus a coarse scale, each
instance contributes the cells nearest its mass center at the two finer
scales. Those member cells (averaged-voxel features plus cell coordinates
relative to the center) are encoded as a set into a fixed-width code, the
fine-scale code cascading into the coarser encoder. Codes are scattered
onto the instance's coarse-mask cells, producing a dense map that the
detection path concatenates with the 2D backbone output.
"""

import numpy as np

from . import geometry
from .autograd import nn, ops
from .autograd.tensor import Tensor


def mass_centers(mask):
    """Per-instance mean cell coordinate of a dense int mask [H, W].

    Returns (ids, centers): ids is the ascending array of nonzero labels
    that occupy at least one cell, centers is float64 [M, 2] rows of
    (row, col). Coordinate sums are exact integers in float64, so the
    centers do not depend on summation order.
    """
    ids = np.unique(mask)
    ids = ids[ids > 0]
    centers = np.zeros((ids.size, 2), dtype=np.float64)
    for i, lab in enumerate(ids):
        rows, cols = np.nonzero(mask == lab)
        centers[i, 0] = rows.sum() / rows.size
        centers[i, 1] = cols.sum() / cols.size
    return ids, centers


def select_k_nearest(mask, lab, center, k):
    """Up to k cells of ``mask == lab`` nearest ``center``, int64 [m, 2].

    Ordered by squared Euclidean distance in cell units, ties broken by
    (row, col) ascending; returns all cells when the instance has fewer
    than k.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    cells = np.argwhere(mask == lab)
    if cells.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    dr = cells[:, 0] - center[0]
    dc = cells[:, 1] - center[1]
    d2 = dr * dr + dc * dc
    order = np.lexsort((cells[:, 1], cells[:, 0], d2))
    return cells[order[: min(k, len(cells))]].astype(np.int64)


def position_embed(cells, center):
    """Member cell positions relative to the instance center, float64 [m, 2]."""
    return np.asarray(cells, dtype=np.float64) - np.asarray(center, dtype=np.float64)


class VFE(nn.Module):
    """Set feature encoder: per-member linear + layer norm + ReLU, with the
    per-feature max over members concatenated back onto every member.

    [n, d_in] -> [n, 2 * d_out]. A single-member set yields [h, h]: its own
    features are also the set max. Raises on an empty set; callers skip
    instances with no members instead.
    """

    def __init__(self, d_in, d_out, rng=None):
        super().__init__()
        self.d_in = int(d_in)
        self.d_out = int(d_out)
        self.fc = nn.Linear(d_in, d_out, rng=rng)
        self.norm = nn.LayerNorm(d_out)

    def forward(self, x):
        if x.shape[0] == 0:
            raise ValueError("VFE needs at least one member")
        if x.shape[1] != self.d_in:
            raise ValueError(f"expected {self.d_in} features, got {x.shape[1]}")
        h = ops.relu(self.norm(self.fc(x)))
        mx = ops.amax(h, axis=0, keepdims=True)
        return ops.concat([h, ops.broadcast_to(mx, h.shape)], axis=1)


class InstanceEncoder(nn.Module):
    """Encodes one instance's member set at a single scale.

    VFE over the members, a per-member two-layer MLP, then average and max
    pools over the set concatenated into one vector: [n, d_in] ->
    [2 * d_code]. Member rows are sorted lexicographically on entry: max
    pooling is order-free but float averaging is not, and the sort makes
    the code bitwise identical under any permutation of the input rows.
    """

    def __init__(self, d_in, d_code, vfe_ratio=4, mlp_ratio=4, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        if d_in < 1 or d_code < 1:
            raise ValueError("widths must be positive")
        self.d_in = int(d_in)
        self.d_code = int(d_code)
        self.vfe = VFE(d_in, vfe_ratio * d_in, rng=rng)
        hidden = mlp_ratio * d_code
        self.mlp = nn.Sequential(
            nn.Linear(2 * vfe_ratio * d_in, hidden, rng=rng),
            nn.ReLU(),
            nn.Linear(hidden, d_code, rng=rng),
        )

    def forward(self, x):
        order = np.lexsort(x.data.T[::-1])  # canonical member order
        m = self.mlp(self.vfe(ops.gather_rows(x, order)))
        return ops.concat([ops.tensor_mean(m, axis=0), ops.amax(m, axis=0)],
                          axis=0)


def _gather_cells(feat, cells):
    """Differentiable pixel gather: feat [C, H, W], cells [m, 2] -> [m, C]."""
    c, h, w = feat.shape
    flat = ops.reshape(feat, (c, h * w))
    return ops.transpose2d(ops.gather_cols(flat, cells[:, 0] * w + cells[:, 1]))


class IFR(nn.Module):
    """Two-scale instance feature retrieval with a fine-to-coarse cascade.

    out_channels = 4 * c1: the code is [v_s1; v_s2] where each scale's v is
    an avg/max pool pair of width 2 * c1. An instance present in the coarse
    mask but absent from a finer scale keeps a zero vector in that slot so
    the code width never changes; the cascade input is then zero too.
    """

    DOWN = ((2, 2, 2), (4, 4, 4))

    def __init__(self, c1, k1=16, k2=25, vfe_ratio=4, mlp_ratio=4, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        if k1 < 1 or k2 < 1:
            raise ValueError("K must be >= 1")
        self.c1 = int(c1)
        self.k1 = int(k1)
        self.k2 = int(k2)
        self.enc1 = InstanceEncoder(c1 + 2, c1, vfe_ratio, mlp_ratio, rng)
        # cascade appends the 2*c1-wide s1 code to every s2 member
        self.enc2 = InstanceEncoder(3 * c1 + 2, c1, vfe_ratio, mlp_ratio, rng)
        self.out_channels = 4 * c1

    def forward(self, pyramid, occ, scale1, scale2, coarse):
        """Dense instance-code map [4*c1, Hc, Wc].

        pyramid: ScalePyramid whose s1/s2 live at 1/2 and 1/4 resolution;
        occ: full-resolution bool occupancy [Z, H, W]; scale1, scale2,
        coarse: (mask, original_ids) pairs from rasterize_instances of one
        labeling at down factors (2, 2), (4, 4), (8, 8). Correspondence
        across scales is by original instance ID.
        """
        mask_c, orig_c = coarse
        hc, wc = mask_c.shape
        dt = self.enc1.vfe.fc.weight.data.dtype
        if orig_c.size == 0:
            return Tensor(np.zeros((self.out_channels, hc, wc), dtype=dt))

        avg1 = geometry.average_over_height(
            pyramid.s1, geometry.downsample_occupancy(occ, self.DOWN[0]))
        avg2 = geometry.average_over_height(
            pyramid.s2, geometry.downsample_occupancy(occ, self.DOWN[1]))
        state1 = self._scale_state(scale1)
        state2 = self._scale_state(scale2)

        rows, idx = [], []
        for dense_c, orig in enumerate(orig_c, start=1):
            v1 = self._encode(self.enc1, avg1, state1, orig, self.k1, None, dt)
            v2 = self._encode(self.enc2, avg2, state2, orig, self.k2, v1, dt)
            code = ops.concat([v1, v2], axis=0)
            cells = np.argwhere(mask_c == dense_c)
            rows.append(ops.broadcast_to(
                ops.reshape(code, (1, self.out_channels)),
                (len(cells), self.out_channels)))
            idx.append(cells[:, 0] * wc + cells[:, 1])
        vol = ops.scatter_rows(ops.concat(rows, axis=0),
                               np.concatenate(idx), hc * wc)
        return ops.reshape(ops.transpose2d(vol), (self.out_channels, hc, wc))

    @staticmethod
    def _scale_state(masks):
        mask, orig_ids = masks
        _, centers = mass_centers(mask)
        # original id -> (dense label, center); dense labels are 1..M in
        # ascending original order, matching mass_centers' ascending ids
        return mask, {int(o): (i + 1, centers[i]) for i, o in enumerate(orig_ids)}

    def _encode(self, enc, avg, state, orig, k, cascade, dt):
        mask, table = state
        hit = table.get(int(orig))
        if hit is None:
            return Tensor(np.zeros(2 * enc.d_code, dtype=dt))
        dense, center = hit
        cells = select_k_nearest(mask, dense, center, k)
        member = [_gather_cells(avg, cells),
                  Tensor(position_embed(cells, center).astype(dt))]
        if cascade is not None:
            cas = ops.reshape(cascade, (1, cascade.shape[0]))
            member.append(ops.broadcast_to(cas, (len(cells), cascade.shape[0])))
        return enc(ops.concat(member, axis=1))
