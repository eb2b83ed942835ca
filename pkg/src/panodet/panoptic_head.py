"""Range-view panoptic head: U-Net segmentation plus offset clustering.

The head consumes the projected range image and the 3D feature pyramid,
fuses them with attention at three resolutions, and emits dense semantic
logits and per-pixel BEV offsets toward the instance center. Instances are
recovered by shifting foreground points by their predicted offsets and
flood-filling the occupied pillar grid.
"""

import warnings
from collections import deque
from dataclasses import dataclass

import numpy as np

from .autograd import nn, ops, losses
from .autograd.tensor import Tensor, as_tensor
from .backbone3d import CBAM
from .blocks import ConvBlock2d
from .geometry import (downsample_occupancy, downsample_rv_index,
                       rv_pixel_coords, voxel_to_rv)


@dataclass
class PanopticPrediction:
    semantic: np.ndarray      # int64 [N] per-point class
    instance: np.ndarray      # int64 [N]; 0 = background/stuff, else {1..M}


class PanopticHead(nn.Module):
    """U-Net over the range view with voxel-feature fusion.

    The encoder runs at full, half and quarter RV resolution; at each stage
    the matching pyramid scale is projected into the view through a 1x1
    compression conv and fused with channel/spatial attention. Two decoders
    share the encoder features through skip connections: one emits semantic
    logits [Ncls,H,W], the other BEV center offsets [2,H,W].
    """

    # (fz, fy, fx) voxel-grid factors of the three pyramid scales
    DOWN = ((2, 2, 2), (4, 4, 4), (16, 8, 8))

    def __init__(self, n_classes, c_in=5, widths=(16, 32, 64),
                 vox_widths=(32, 32, 64), spatial_k=7, use_pyramid=True,
                 rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        w1, w2, w3 = widths
        self.n_classes = n_classes
        self.use_pyramid = use_pyramid
        self.enc1 = ConvBlock2d(c_in, w1, rng=rng)
        self.enc2 = ConvBlock2d(w1, w2, stride=2, rng=rng)
        self.enc3 = ConvBlock2d(w2, w3, stride=2, rng=rng)
        if use_pyramid:
            self.proj1 = nn.Conv2d(vox_widths[0], w1, k=1, rng=rng)
            self.proj2 = nn.Conv2d(vox_widths[1], w2, k=1, rng=rng)
            self.proj3 = nn.Conv2d(vox_widths[2], w3, k=1, rng=rng)
            self.fuse1 = CBAM(w1, spatial_k=spatial_k, rng=rng)
            self.fuse2 = CBAM(w2, spatial_k=spatial_k, rng=rng)
            self.fuse3 = CBAM(w3, spatial_k=spatial_k, rng=rng)
        self.sem_up2 = ConvBlock2d(w3 + w2, w2, rng=rng)
        self.sem_up1 = ConvBlock2d(w2 + w1, w1, rng=rng)
        self.sem_out = nn.Conv2d(w1, n_classes, k=1, rng=rng)
        self.off_up2 = ConvBlock2d(w3 + w2, w2, rng=rng)
        self.off_up1 = ConvBlock2d(w2 + w1, w1, rng=rng)
        self.off_out = nn.Conv2d(w1, 2, k=1, rng=rng)

    def forward(self, rv, pyramid, occ, pts, grid):
        """rv: RVImage; pyramid: ScalePyramid; occ: bool [Z,H,W] from
        voxelize at full resolution. Returns (logits, offsets). With
        use_pyramid=False the 3D arguments are ignored and the head runs
        on range-view features alone."""
        h, w = rv.index.shape
        if h % 4 or w % 4:
            raise ValueError(f"RV resolution {h}x{w} must be divisible by 4")
        dt = self.sem_out.weight.data.dtype
        x = as_tensor(np.asarray(rv.features, dtype=dt))
        if self.use_pyramid:
            ranges = rv.features[3]
            idx2 = downsample_rv_index(rv.index, ranges, (2, 2))
            idx4 = downsample_rv_index(rv.index, ranges, (4, 4))
            vox = []
            for s, idx, proj in ((pyramid.s1, rv.index, self.proj1),
                                 (pyramid.s2, idx2, self.proj2),
                                 (pyramid.s3, idx4, self.proj3)):
                down = self.DOWN[len(vox)]
                o = downsample_occupancy(occ, down)
                vox.append(voxel_to_rv(s, o, pts, idx, grid, down, proj))
            e1 = self.fuse1(self.enc1(x), vox[0])
            e2 = self.fuse2(self.enc2(e1), vox[1])
            e3 = self.fuse3(self.enc3(e2), vox[2])
        else:
            e1 = self.enc1(x)
            e2 = self.enc2(e1)
            e3 = self.enc3(e2)

        d2 = self.sem_up2(ops.concat([ops.upsample_nearest2d(e3, 2), e2]))
        d1 = self.sem_up1(ops.concat([ops.upsample_nearest2d(d2, 2), e1]))
        logits = self.sem_out(d1)
        d2 = self.off_up2(ops.concat([ops.upsample_nearest2d(e3, 2), e2]))
        d1 = self.off_up1(ops.concat([ops.upsample_nearest2d(d2, 2), e1]))
        offsets = self.off_out(d1)
        return logits, offsets


def instance_offsets(pts, inst):
    """Per-point BEV offset toward the instance mass center: [N,2] f64.

    The center of an instance is the mean x/y of its member points; points
    with inst == 0 get zero offset.
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 4)
    inst = np.asarray(inst, dtype=np.int64)
    off = np.zeros((pts.shape[0], 2), dtype=np.float64)
    labels = np.unique(inst[inst > 0])
    for lab in labels:
        m = inst == lab
        off[m] = pts[m, :2].mean(axis=0) - pts[m, :2]
    return off


def rv_targets(rv, pts, sem, inst, ignore_index=255):
    """Rasterize per-point ground truth onto the range view.

    Returns (sem_target [H,W] int64 with ignore_index on empty pixels,
    offset_target [2,H,W] f32 toward the instance center, fg [H,W] bool
    marking pixels whose point carries an instance ID).
    """
    sem = np.asarray(sem, dtype=np.int64)
    inst = np.asarray(inst, dtype=np.int64)
    h, w = rv.index.shape
    sem_t = np.full((h, w), ignore_index, dtype=np.int64)
    off_t = np.zeros((2, h, w), dtype=np.float32)
    fg = np.zeros((h, w), dtype=bool)

    valid = rv.index >= 0
    pid = rv.index[valid]
    sem_t[valid] = sem[pid]
    off = instance_offsets(pts, inst)
    off_t[0][valid] = off[pid, 0]
    off_t[1][valid] = off[pid, 1]
    fg[valid] = inst[pid] > 0
    return sem_t, off_t, fg


def panoptic_loss(logits, offsets, sem_target, off_target, fg,
                  class_weight=None, w_sem=1.0, w_off=1.0, ignore_index=255):
    """Weighted cross-entropy over valid pixels plus L2 offset regression
    over foreground pixels. No valid pixels gives a zero loss (warned)."""
    ncls = logits.shape[0]
    n = sem_target.size
    if not (sem_target != ignore_index).any():
        warnings.warn("panoptic loss: target has no valid pixels")
        return 0.0 * (ops.tensor_sum(logits) + ops.tensor_sum(offsets))
    rows = ops.transpose2d(ops.reshape(logits, (ncls, n)))
    ce = losses.cross_entropy(rows, sem_target.reshape(-1),
                              weight=class_weight, ignore_index=ignore_index)
    off = losses.l2_offset_loss(offsets, off_target, fg)
    return w_sem * ce + w_off * off


def cluster_instances(pts, sem, offsets, thing_classes, pillar=0.5,
                      min_points=5):
    """Group foreground points into instances by offset shifting.

    Each point whose class is in thing_classes moves by its predicted BEV
    offset; shifted points are binned into square pillars of the given size
    and 4-connected components of occupied pillars become instances. IDs
    are assigned in row-major scan order of the pillar grid and components
    with fewer than min_points member points fall back to background.
    Returns int64 [N] instance IDs, contiguous {1..M}.
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 4)
    sem = np.asarray(sem, dtype=np.int64)
    ids = np.zeros(pts.shape[0], dtype=np.int64)
    fg = np.isin(sem, np.asarray(sorted(thing_classes), dtype=np.int64))
    if not fg.any():
        return ids

    shifted = pts[fg, :2] + np.asarray(offsets, dtype=np.float64)[fg]
    bx = np.floor(shifted[:, 0] / pillar).astype(np.int64)
    by = np.floor(shifted[:, 1] / pillar).astype(np.int64)
    bx -= bx.min()
    by -= by.min()
    wgrid = int(bx.max()) + 1
    key = by * wgrid + bx
    uniq, inv = np.unique(key, return_inverse=True)
    pos = {int(k): i for i, k in enumerate(uniq)}

    comp = np.zeros(uniq.shape[0], dtype=np.int64)
    n_comp = 0
    for start in range(uniq.shape[0]):
        if comp[start]:
            continue
        n_comp += 1
        comp[start] = n_comp
        q = deque([start])
        while q:
            j = q.popleft()
            k = int(uniq[j])
            x = k % wgrid
            nbrs = [k - wgrid, k + wgrid]
            if x > 0:
                nbrs.append(k - 1)
            if x < wgrid - 1:
                nbrs.append(k + 1)
            for nk in nbrs:
                i = pos.get(nk)
                if i is not None and not comp[i]:
                    comp[i] = n_comp
                    q.append(i)

    pcomp = comp[inv]
    sizes = np.bincount(pcomp, minlength=n_comp + 1)
    keep = np.nonzero(sizes[1:] >= min_points)[0] + 1
    remap = np.zeros(n_comp + 1, dtype=np.int64)
    remap[keep] = np.arange(1, keep.size + 1)
    ids[fg] = remap[pcomp]
    return ids


def panoptic_predict(logits, offsets, pts, spec, thing_classes, pillar=0.5,
                     min_points=5):
    """Decode dense head outputs into per-point labels.

    Pixel predictions are pulled back to points through the spherical
    binning; points outside the FOV get class 0 and no instance.
    """
    logits = np.asarray(logits.data if isinstance(logits, Tensor) else logits)
    offsets = np.asarray(offsets.data if isinstance(offsets, Tensor) else offsets)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 4)
    ok, row, col, _ = rv_pixel_coords(pts, spec)

    sem_img = logits.argmax(axis=0)
    sem = np.zeros(pts.shape[0], dtype=np.int64)
    sem[ok] = sem_img[row[ok], col[ok]]
    off = np.zeros((pts.shape[0], 2), dtype=np.float64)
    off[ok] = offsets[:, row[ok], col[ok]].T

    inst = cluster_instances(pts, sem, off, thing_classes, pillar, min_points)
    return PanopticPrediction(sem, inst)
