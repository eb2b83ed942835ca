"""Full pipeline assembly: points in, panoptic labels and boxes out.

The voxel volume feeds a shared 3D backbone. One branch collapses the
coarsest scale to BEV, runs the 2D backbone, gets gated by range-view
semantics, picks up per-instance retrieval codes, and predicts boxes. The
other branch segments the range view (fused with the pyramid) into
semantic classes and instance offsets. Three switches ablate the
couplings: `use_dual_task` removes both cross-task fusions, `use_ifr` the
retrieval codes, `use_sc` swaps the 2D backbone for a single conv block.
"""

from dataclasses import dataclass, replace

import numpy as np

from .autograd import nn, ops
from .autograd.tensor import Tensor
from .backbone3d import Backbone3d
from .blocks import ConvBlock2d
from .boxes import Box3D
from .detect_head import (DetectHead, FusionAttention, HeadOutput,
                          decode_boxes, make_targets)
from .geometry import bev_collapse, project_rv, rasterize_instances, voxelize
from .ifr import IFR
from .panoptic_head import PanopticHead, panoptic_predict
from .sc2d import SCBackbone
from .scenegen import N_CLASSES, THING_CLASSES


@dataclass
class ModelOutput:
    rv: object                # RVImage the panoptic branch saw
    sem_logits: Tensor        # [n_classes, Hrv, Wrv]
    offsets: Tensor           # [2, Hrv, Wrv]
    head: HeadOutput          # detection maps on the coarse BEV grid
    mask_source: str          # "teacher", "predicted", or "none"


class PanoDetModel(nn.Module):
    DET_DOWN = 8              # coarse BEV = voxel grid / 8

    def __init__(self, grid, rv_spec, n_classes=N_CLASSES,
                 thing_classes=THING_CLASSES, c0=8, c1=16, c2=32,
                 pan_widths=(16, 32, 64), sc_widths=(32, 32),
                 sc_depths=(1, 2, 2), sc_ratio=2, k_s1=16, k_s2=25,
                 vfe_ratio=4, mlp_ratio=4, det_trunk=64, use_ifr=True,
                 use_dual_task=True, use_sc=True, pillar=0.6, min_points=5,
                 rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.grid = grid
        self.rv_spec = rv_spec
        self.n_classes = n_classes
        self.thing_classes = tuple(sorted(set(int(c) for c in thing_classes)))
        self.pillar = pillar
        self.min_points = min_points
        self.use_ifr = use_ifr
        self.use_dual_task = use_dual_task

        self.embed = nn.Linear(5, c0, rng=rng)
        self.backbone = Backbone3d(c0, c1, c2, rng=rng)
        self.pan = PanopticHead(n_classes, c_in=5, widths=pan_widths,
                                vox_widths=(c1, c1, c2),
                                use_pyramid=use_dual_task, rng=rng)
        bev_in = c2 * (grid.z // 16)
        if use_sc:
            self.sc = SCBackbone(bev_in, sc_widths[0], sc_widths[1],
                                 *sc_depths, ratio=sc_ratio, rng=rng)
            c_bev = self.sc.out_channels
        else:
            c_bev = sc_widths[0] + sc_widths[1]
            self.sc = ConvBlock2d(bev_in, c_bev, rng=rng)
        if use_dual_task:
            self.fusion = FusionAttention(c_bev, self.thing_classes, rng=rng)
            c_det = self.fusion.out_channels
        else:
            c_det = c_bev
        if use_ifr:
            self.ifr = IFR(c1, k_s1, k_s2, vfe_ratio, mlp_ratio, rng=rng)
            c_det += self.ifr.out_channels
        self.det = DetectHead(len(self.thing_classes), c_det,
                              c_trunk=det_trunk, rng=rng)

    def instance_masks(self, pts, inst):
        """(mask, ids) pairs at the three retrieval scales."""
        return (rasterize_instances(pts, inst, self.grid, (2, 2)),
                rasterize_instances(pts, inst, self.grid, (4, 4)),
                rasterize_instances(pts, inst, self.grid, (8, 8)))

    def forward(self, pts, teacher_instances=None):
        """pts: [N,4] point cloud. teacher_instances: optional per-point
        instance IDs that drive feature retrieval instead of the model's
        own clustering (teacher forcing early in training)."""
        vol = voxelize(pts, self.grid, self.embed)
        pyr = self.backbone(vol.features)
        rv = project_rv(pts, self.rv_spec)
        logits, offsets = self.pan(rv, pyr, vol.occupancy, pts, self.grid)

        bev = self.sc(bev_collapse(pyr.s3))
        if self.use_dual_task:
            bev = self.fusion(bev, logits, pts, self.rv_spec, self.grid,
                              down=self.DET_DOWN)
        mask_source = "none"
        if self.use_ifr:
            if teacher_instances is not None:
                inst = np.asarray(teacher_instances, dtype=np.int64)
                mask_source = "teacher"
            else:
                pred = panoptic_predict(logits, offsets, pts, self.rv_spec,
                                        self.thing_classes, self.pillar,
                                        self.min_points)
                inst = pred.instance
                mask_source = "predicted"
            s1, s2, co = self.instance_masks(pts, inst)
            bev = ops.concat([bev, self.ifr(pyr, vol.occupancy, s1, s2, co)])
        return ModelOutput(rv, logits, offsets, self.det(bev), mask_source)

    def predict_panoptic(self, out, pts):
        """Per-point labels from a forward pass."""
        return panoptic_predict(out.sem_logits, out.offsets, pts,
                                self.rv_spec, self.thing_classes,
                                self.pillar, self.min_points)

    def predict_boxes(self, out, score_thresh=0.1, max_dets=64):
        """Decoded boxes with dataset class IDs (heatmap channel i is
        thing_classes[i])."""
        dets = decode_boxes(out.head, self.grid, score_thresh, max_dets,
                            down=self.DET_DOWN)
        return [replace(b, cls=self.thing_classes[b.cls]) for b in dets]

    def detection_targets(self, boxes):
        """make_targets with dataset classes mapped to heatmap channels;
        boxes of non-thing classes are rejected."""
        lut = {c: i for i, c in enumerate(self.thing_classes)}
        try:
            mapped = [replace(b, cls=lut[b.cls]) for b in boxes]
        except KeyError as e:
            raise ValueError(f"box class {e.args[0]} is not a thing class")
        return make_targets(mapped, self.grid, len(self.thing_classes),
                            down=self.DET_DOWN)



def build_model(cfg, rng=None):
    """PanoDetModel from a RunConfig; all weights from the config seed."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    return PanoDetModel(
        cfg.grid(), cfg.rv(), c0=cfg.c0, c1=cfg.c1, c2=cfg.c2,
        pan_widths=(cfg.pan_w1, cfg.pan_w2, cfg.pan_w3),
        sc_widths=(cfg.sc_width1, cfg.sc_width2),
        sc_depths=(cfg.sc_n0, cfg.sc_n1, cfg.sc_n2), sc_ratio=cfg.sc_ratio,
        k_s1=cfg.k_s1, k_s2=cfg.k_s2, vfe_ratio=cfg.vfe_ratio,
        mlp_ratio=cfg.mlp_ratio, det_trunk=cfg.det_trunk,
        use_ifr=not cfg.no_ifr, use_dual_task=not cfg.no_dual_task,
        use_sc=not cfg.no_sc, pillar=cfg.pillar, min_points=cfg.min_points,
        rng=rng)
