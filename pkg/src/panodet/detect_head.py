"""Center-based detection head over fused BEV features.

A shared 3x3 trunk feeds five 1x1 heads: per-class center heatmaps plus
sub-cell offset, height, log-size, and yaw (sin, cos) regression maps.
Targets render each box as a Gaussian peak on its class heatmap with
regression values written at the center cell; decoding picks 3x3-max
peaks and inverts the target transform, so decoding the rendered targets
of non-overlapping boxes recovers them. A small fusion module gates the
BEV features with class-wise foreground scores pulled back from the
panoptic semantic logits, which is how the segmentation branch informs
detection.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import geometry
from .autograd import losses, nn, ops
from .autograd.tensor import Tensor
from .blocks import ConvBlock2d
from .boxes import Box3D, wrap_angle


@dataclass
class HeadOutput:
    """Five dense maps on the coarse BEV grid; Tensors out of the head,
    plain float64 arrays out of make_targets."""

    heatmap: object   # [Ncls, Hc, Wc], in (0,1) out of the head
    offset: object    # [2, Hc, Wc] sub-cell (x, y)
    z: object         # [1, Hc, Wc] center height
    logsize: object   # [3, Hc, Wc] log (l, w, h)
    yaw: object       # [2, Hc, Wc] (sin, cos), unnormalized


class DetectHead(nn.Module):
    """Shared 3x3 trunk + per-task 1x1 heads, single head for all classes."""

    def __init__(self, n_classes, c_in, c_trunk=64, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        if n_classes < 1:
            raise ValueError("need at least one class")
        self.n_classes = int(n_classes)
        self.trunk = ConvBlock2d(c_in, c_trunk, rng=rng)
        # negative heatmap bias so the initial peak probability is ~0.1,
        # keeping the focal loss away from its saturated flat region
        self.hm = nn.Conv2d(c_trunk, n_classes, k=1, bias_fill=-2.19, rng=rng)
        self.off = nn.Conv2d(c_trunk, 2, k=1, rng=rng)
        self.zc = nn.Conv2d(c_trunk, 1, k=1, rng=rng)
        self.size = nn.Conv2d(c_trunk, 3, k=1, rng=rng)
        self.rot = nn.Conv2d(c_trunk, 2, k=1, rng=rng)

    def forward(self, x):
        t = self.trunk(x)
        return HeadOutput(ops.sigmoid(self.hm(t)), self.off(t), self.zc(t),
                          self.size(t), self.rot(t))


class FusionAttention(nn.Module):
    """Gate BEV features with class-wise foreground scores.

    Per-point semantic probabilities (softmax of the panoptic logits at
    each point's range-view pixel) are max-scattered per thing class onto
    the coarse BEV grid, giving a score map S [Nfg, Hc, Wc] (cells with no
    points stay 0). Output = bev * (1 + sigmoid(conv1x1(S))) concat S, so
    the channel count grows by Nfg.
    """

    def __init__(self, c_bev, thing_classes, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.thing_classes = tuple(sorted(set(int(c) for c in thing_classes)))
        if not self.thing_classes:
            raise ValueError("need at least one thing class")
        self.gate = nn.Conv2d(len(self.thing_classes), c_bev, k=1, rng=rng)
        self.out_channels = c_bev + len(self.thing_classes)

    def foreground_scores(self, sem_logits, pts, spec, grid, down=8):
        """Differentiable S [Nfg, Hc, Wc] from range-view logits."""
        ncls = sem_logits.shape[0]
        hc, wc = grid.h // down, grid.w // down
        nfg = len(self.thing_classes)
        dt = sem_logits.data.dtype

        valid, row, col, _ = geometry.rv_pixel_coords(pts, spec)
        inside, _, iy, ix = grid.bin_points(pts)
        iyf = np.zeros(len(pts), dtype=np.int64)
        ixf = np.zeros(len(pts), dtype=np.int64)
        iyf[inside], ixf[inside] = iy, ix
        sel = valid & inside
        if not sel.any():
            return Tensor(np.zeros((nfg, hc, wc), dtype=dt))

        pix = row[sel] * spec.w + col[sel]
        cell = (iyf[sel] // down) * wc + (ixf[sel] // down)
        logit_cols = ops.gather_cols(
            ops.reshape(sem_logits, (ncls, spec.h * spec.w)), pix)
        probs = ops.softmax(logit_cols, axis=0)
        fg = ops.transpose2d(ops.gather_rows(probs, self.thing_classes))
        smap = ops.scatter_max(fg, cell, hc * wc, fill=0.0)
        return ops.reshape(ops.transpose2d(smap), (nfg, hc, wc))

    def forward(self, bev, sem_logits, pts, spec, grid, down=8):
        s = self.foreground_scores(sem_logits, pts, spec, grid, down)
        if s.shape[1:] != bev.shape[1:]:
            raise ValueError(
                f"bev map {bev.shape} does not sit on the /{down} grid {s.shape}")
        g = ops.sigmoid(self.gate(s))
        return ops.concat([bev * (1.0 + g), s], axis=0)


def _radius_cells(box, px, py):
    # half the smaller footprint side, in cells, floored at one cell
    return max(1, int(round(0.5 * min(box.l / px, box.w / py))))


def make_targets(boxes, grid, n_classes, down=8):
    """Render boxes to HeadOutput-shaped float64 targets.

    Returns (targets, mask, n_skipped): mask flags center cells (where the
    regression targets are written; a later box overwrites a colliding
    earlier one), n_skipped counts boxes whose center lies outside the
    grid. Heatmaps take the max over overlapping Gaussians; each splat has
    sigma = (2r + 1) / 6 with r from the box footprint, so the center cell
    is exactly 1.0.
    """
    if grid.h % down or grid.w % down:
        raise ValueError("grid does not divide by the head stride")
    hc, wc = grid.h // down, grid.w // down
    px, py = grid.dx * down, grid.dy * down
    hm = np.zeros((n_classes, hc, wc), dtype=np.float64)
    off = np.zeros((2, hc, wc), dtype=np.float64)
    zc = np.zeros((1, hc, wc), dtype=np.float64)
    size = np.zeros((3, hc, wc), dtype=np.float64)
    rot = np.zeros((2, hc, wc), dtype=np.float64)
    mask = np.zeros((hc, wc), dtype=bool)
    skipped = 0

    for b in boxes:
        if not 0 <= b.cls < n_classes:
            raise ValueError(f"class {b.cls} out of range")
        ux = (b.x - grid.x_min) / px
        uy = (b.y - grid.y_min) / py
        ix, iy = int(np.floor(ux)), int(np.floor(uy))
        if not (0 <= ix < wc and 0 <= iy < hc):
            skipped += 1
            continue
        r = _radius_cells(b, px, py)
        sig2 = 2.0 * ((2.0 * r + 1.0) / 6.0) ** 2
        y0, y1 = max(0, iy - r), min(hc, iy + r + 1)
        x0, x1 = max(0, ix - r), min(wc, ix + r + 1)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        g = np.exp(-((yy - iy) ** 2 + (xx - ix) ** 2) / sig2)
        hm[b.cls, y0:y1, x0:x1] = np.maximum(hm[b.cls, y0:y1, x0:x1], g)
        mask[iy, ix] = True
        off[:, iy, ix] = (ux - ix, uy - iy)
        zc[0, iy, ix] = b.z
        size[:, iy, ix] = np.log([b.l, b.w, b.h])
        rot[:, iy, ix] = (math.sin(b.yaw), math.cos(b.yaw))

    return HeadOutput(hm, off, zc, size, rot), mask, skipped


def _as_np(v):
    return np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64)


def decode_boxes(out, grid, score_thresh=0.1, max_dets=128, down=8):
    """Peaks -> Box3D list, highest score first.

    A peak is a cell that is the first maximum (in row-major scan order)
    of its own 3x3 neighborhood with score strictly above score_thresh;
    two equal adjacent maxima therefore yield one box, the earlier cell.
    """
    hm = _as_np(out.heatmap)
    off = _as_np(out.offset)
    zc = _as_np(out.z)
    size = _as_np(out.logsize)
    rot = _as_np(out.yaw)
    ncls, hc, wc = hm.shape
    px, py = grid.dx * down, grid.dy * down

    pad = np.full((ncls, hc + 2, wc + 2), -np.inf)
    pad[:, 1:-1, 1:-1] = hm
    win = np.stack([pad[:, 1 + dy:1 + dy + hc, 1 + dx:1 + dx + wc]
                    for dy in (-1, 0, 1) for dx in (-1, 0, 1)])
    peak = (win.argmax(axis=0) == 4) & (hm > score_thresh)

    cls_i, iy, ix = np.nonzero(peak)
    score = hm[cls_i, iy, ix]
    keep = np.lexsort((ix, iy, cls_i, -score))[:max_dets]

    dets = []
    for j in keep:
        c, y, x = int(cls_i[j]), int(iy[j]), int(ix[j])
        bx = grid.x_min + (x + off[0, y, x]) * px
        by = grid.y_min + (y + off[1, y, x]) * py
        l, w, h = np.exp(size[:, y, x])
        yaw = wrap_angle(math.atan2(rot[0, y, x], rot[1, y, x]))
        dets.append(Box3D(bx, by, zc[0, y, x], l, w, h, float(yaw),
                          c, float(score[j])))
    return dets


def detection_loss(out, targets, mask, w_hm=1.0, w_reg=1.0):
    """Focal loss on heatmaps + L1 on the regression stack at center cells.

    With no positive cells the regression term is exactly zero and the
    heatmap term stands alone.
    """
    hm_l = losses.focal_heatmap_loss(out.heatmap, targets.heatmap)
    pred = ops.concat([out.offset, out.z, out.logsize, out.yaw], axis=0)
    tgt = np.concatenate([targets.offset, targets.z, targets.logsize,
                          targets.yaw], axis=0)
    reg_l = losses.l1_loss(pred, tgt, mask=np.asarray(mask)[None])
    return w_hm * hm_l + w_reg * reg_l
