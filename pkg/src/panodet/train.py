"""Training loop: joint detection + panoptic optimization.

One scene per step, round-robin, no ambient randomness: every draw in the
whole run comes from the config seed, so a rerun is bit-identical and a
resumed run continues exactly where the checkpoint stopped. Ground-truth
instance IDs drive feature retrieval for the first `teacher_forcing_epochs`
passes over the dataset; after that the model clusters for itself.
"""

import math
import os
from dataclasses import dataclass

import numpy as np

from .autograd.optim import Adam
from .detect_head import detection_loss
from .geometry import project_rv
from .model import build_model
from .panoptic_head import panoptic_loss, rv_targets
from .serial import load_checkpoint, save_checkpoint, save_labels, save_points

LOG_HEADER = "step,scene,loss,det_loss,pan_loss,mask_source"


@dataclass
class SceneData:
    """One scene with its precomputed, model-shape-dependent targets."""

    points: np.ndarray
    semantic: np.ndarray
    instance: np.ndarray
    det_targets: object      # HeadOutput of float64 target maps
    det_mask: np.ndarray     # bool [Hc, Wc] center cells
    sem_target: np.ndarray   # int64 [Hrv, Wrv]
    off_target: np.ndarray   # f32 [2, Hrv, Wrv]
    fg: np.ndarray           # bool [Hrv, Wrv]


def prepare_scene(model, sample):
    det_targets, det_mask, skipped = model.detection_targets(sample.boxes)
    if skipped:
        raise ValueError(f"{skipped} box(es) fall outside the grid; "
                         "the grid extent must cover the scene")
    rv = project_rv(sample.points, model.rv_spec)
    sem_t, off_t, fg = rv_targets(rv, sample.points, sample.semantic,
                                  sample.instance)
    return SceneData(sample.points, sample.semantic, sample.instance,
                     det_targets, det_mask, sem_t, off_t, fg)


def _dump_diagnostics(dump_dir, step, scene_idx, data, det, pan):
    os.makedirs(dump_dir, exist_ok=True)
    save_points(os.path.join(dump_dir, "scene.aopc"), data.points)
    save_labels(os.path.join(dump_dir, "scene.aopl"),
                data.semantic, data.instance)
    with open(os.path.join(dump_dir, "info.txt"), "w") as f:
        f.write(f"step = {step}\nscene = {scene_idx}\n"
                f"det_loss = {det!r}\npan_loss = {pan!r}\n")


def train(cfg, samples, ckpt_dir, resume_from=None, log_path=None,
          class_weight=None):
    """Train on the given scenes and write a checkpoint plus a loss log.

    Returns (model, rows) where rows are the log entries
    (step, scene, loss, det_loss, pan_loss, mask_source). Raises
    RuntimeError on a non-finite loss after dumping the offending scene.
    """
    if not samples:
        raise ValueError("dataset is empty")
    if cfg.w_det == 0.0 and cfg.w_pan == 0.0:
        raise ValueError("both loss weights are zero; nothing to train")
    model = build_model(cfg)
    opt = Adam(model.named_parameters(), lr=cfg.lr,
               weight_decay=cfg.weight_decay)
    start = 0
    if resume_from is not None:
        start = load_checkpoint(resume_from, model, opt)
        if start > cfg.steps:
            raise ValueError(f"checkpoint is at step {start}, past the "
                             f"configured {cfg.steps}")
    data = [prepare_scene(model, s) for s in samples]

    log = None
    if log_path is not None:
        parent = os.path.dirname(str(log_path))
        if parent:
            os.makedirs(parent, exist_ok=True)
        log = open(log_path, "a" if resume_from is not None else "w")
        if start == 0:
            log.write(LOG_HEADER + "\n")
    rows = []
    try:
        for step in range(start, cfg.steps):
            scene_idx = step % len(data)
            sc = data[scene_idx]
            teacher = (step // len(data)) < cfg.teacher_forcing_epochs
            out = model(sc.points,
                        teacher_instances=sc.instance if teacher else None)

            # zero-weight terms are skipped outright: their parameters see
            # no gradient at all rather than an explicit zero
            terms = []
            det_v = pan_v = 0.0
            if cfg.w_det != 0.0:
                det_l = detection_loss(out.head, sc.det_targets, sc.det_mask)
                det_v = float(np.asarray(det_l.data))
                terms.append(cfg.w_det * det_l)
            if cfg.w_pan != 0.0:
                pan_l = panoptic_loss(out.sem_logits, out.offsets,
                                      sc.sem_target, sc.off_target, sc.fg,
                                      class_weight=class_weight)
                pan_v = float(np.asarray(pan_l.data))
                terms.append(cfg.w_pan * pan_l)
            loss = terms[0] if len(terms) == 1 else terms[0] + terms[1]
            total = float(np.asarray(loss.data))

            if not math.isfinite(total):
                dump = os.path.join(ckpt_dir, "nan_dump")
                _dump_diagnostics(dump, step, scene_idx, sc, det_v, pan_v)
                raise RuntimeError(
                    f"non-finite loss at step {step} (det={det_v!r}, "
                    f"pan={pan_v!r}); diagnostics written to {dump}")

            opt.zero_grad()
            loss.backward()
            opt.step()

            row = (step, scene_idx, total, det_v, pan_v, out.mask_source)
            rows.append(row)
            if log is not None:
                log.write(f"{step},{scene_idx},{total!r},{det_v!r},"
                          f"{pan_v!r},{out.mask_source}\n")
    finally:
        if log is not None:
            log.close()
    save_checkpoint(ckpt_dir, model, opt, step=cfg.steps)
    return model, rows
