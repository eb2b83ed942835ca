"""Evaluation: run the trained pipeline per scene, aggregate the metrics.

Scenes are independent, so --jobs fans them out over forked workers; the
per-scene work is deterministic, which makes the parallel result identical
to the sequential one. Panoptic scores aggregate as the mean of per-scene
scores (stuff classes form one segment per scene, so pooling points across
scenes would change what a segment is); detection AP is computed over all
scenes jointly, which is how the matcher is defined.
"""

import multiprocessing
import os
from dataclasses import dataclass

import numpy as np

from .geometry import rasterize_instances
from .metrics import (DetectionScore, PanopticScore, average_precision,
                      panoptic_quality)
from .model import build_model
from .pgm import to_gray, write_pgm
from .scenegen import CLASS_NAMES, N_CLASSES, THING_CLASSES
from .serial import load_checkpoint

AP_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)


@dataclass
class ScenePrediction:
    semantic: np.ndarray      # int64 per point
    instance: np.ndarray      # int64 per point
    boxes: list
    rv_semantic: np.ndarray   # int64 [Hrv, Wrv] argmax map (for dumps)
    heatmap: np.ndarray       # f32 [Hc, Wc] max over classes (for dumps)


def predict_scene(model, sample, score_thresh=0.1, max_dets=64):
    out = model(sample.points)
    pan = model.predict_panoptic(out, sample.points)
    boxes = model.predict_boxes(out, score_thresh, max_dets)
    rv_sem = np.argmax(np.asarray(out.sem_logits.data), axis=0)
    heat = np.asarray(out.head.heatmap.data).max(axis=0)
    return ScenePrediction(pan.semantic, pan.instance, boxes,
                           rv_sem.astype(np.int64), heat)


def gt_predictions(samples):
    """Predictions that echo the ground truth (metric sanity path)."""
    out = []
    for s in samples:
        rv = np.zeros((1, 1), dtype=np.int64)
        out.append(ScenePrediction(s.semantic, s.instance, list(s.boxes),
                                   rv, np.zeros((1, 1), dtype=np.float32)))
    return out


_WORKER = {}


def _init_worker(model, samples, score_thresh, max_dets):
    _WORKER.update(model=model, samples=samples,
                   score_thresh=score_thresh, max_dets=max_dets)


def _run_scene(i):
    return predict_scene(_WORKER["model"], _WORKER["samples"][i],
                         _WORKER["score_thresh"], _WORKER["max_dets"])


def run_model(model, samples, score_thresh=0.1, max_dets=64, jobs=1):
    """ScenePrediction per scene, in dataset order."""
    if jobs <= 1:
        return [predict_scene(model, s, score_thresh, max_dets)
                for s in samples]
    ctx = multiprocessing.get_context("fork")
    with ctx.Pool(jobs, initializer=_init_worker,
                  initargs=(model, samples, score_thresh, max_dets)) as pool:
        return pool.map(_run_scene, range(len(samples)))


def _mean_field(values):
    return float(sum(values) / len(values))


def _nanmean_rows(rows):
    """Columnwise mean ignoring NaN; all-NaN columns stay NaN."""
    a = np.stack(rows)
    cnt = (~np.isnan(a)).sum(axis=0)
    out = np.full(a.shape[1], np.nan)
    nz = cnt > 0
    out[nz] = np.nansum(a, axis=0)[nz] / cnt[nz]
    return out


def aggregate(samples, preds):
    """(PanopticScore, DetectionScore) over a dataset.

    Panoptic fields are means of per-scene scores; per-class entries
    average over the scenes where the class occurs.
    """
    if len(samples) != len(preds):
        raise ValueError("sample/prediction counts differ")
    if not samples:
        raise ValueError("dataset is empty")
    scores = [panoptic_quality(p.semantic, p.instance,
                               s.semantic, s.instance,
                               N_CLASSES, THING_CLASSES)
              for s, p in zip(samples, preds)]
    pan = PanopticScore(
        pq=_mean_field([s.pq for s in scores]),
        rq=_mean_field([s.rq for s in scores]),
        sq=_mean_field([s.sq for s in scores]),
        pq_things=_mean_field([s.pq_things for s in scores]),
        pq_stuff=_mean_field([s.pq_stuff for s in scores]),
        miou=_mean_field([s.miou for s in scores]),
        per_class_pq=_nanmean_rows([s.per_class_pq for s in scores]),
        per_class_rq=_nanmean_rows([s.per_class_rq for s in scores]),
        per_class_sq=_nanmean_rows([s.per_class_sq for s in scores]),
        per_class_iou=_nanmean_rows([s.per_class_iou for s in scores]))
    det = average_precision([p.boxes for p in preds],
                            [list(s.boxes) for s in samples],
                            n_classes=N_CLASSES, thresholds=AP_THRESHOLDS)
    return pan, det


def evaluate(cfg, samples, ckpt_dir, jobs=1, dump_dir=None):
    """Load the checkpoint, run every scene, return (pan, det) scores."""
    if not samples:
        raise ValueError("dataset is empty")
    model = build_model(cfg)
    load_checkpoint(ckpt_dir, model)
    preds = run_model(model, samples, cfg.score_thresh, cfg.max_dets,
                      jobs=jobs)
    if dump_dir is not None:
        dump_images(dump_dir, model, samples, preds)
    return aggregate(samples, preds)


def dump_images(dump_dir, model, samples, preds):
    """Qualitative PGMs: center heatmap, BEV instances, RV semantics."""
    os.makedirs(dump_dir, exist_ok=True)
    for i, (s, p) in enumerate(zip(samples, preds)):
        write_pgm(os.path.join(dump_dir, f"heatmap_{i:04d}.pgm"),
                  to_gray(p.heatmap, 0.0, 1.0))
        write_pgm(os.path.join(dump_dir, f"rv_semantic_{i:04d}.pgm"),
                  to_gray(p.rv_semantic, 0, N_CLASSES - 1))
        mask, _ = rasterize_instances(s.points, p.instance, model.grid)
        write_pgm(os.path.join(dump_dir, f"bev_instances_{i:04d}.pgm"),
                  to_gray(mask, 0, max(1, int(mask.max()))))


def write_metrics_csv(path, pan, det):
    """Flat metric,class,value rows; floats via repr, undefined as nan."""
    def fmt(v):
        return repr(float(v))

    with open(path, "w") as f:
        f.write("metric,class,value\n")
        for name, v in [("pq", pan.pq), ("rq", pan.rq), ("sq", pan.sq),
                        ("pq_things", pan.pq_things),
                        ("pq_stuff", pan.pq_stuff), ("miou", pan.miou)]:
            f.write(f"{name},all,{fmt(v)}\n")
        percls = [("pq", pan.per_class_pq), ("rq", pan.per_class_rq),
                  ("sq", pan.per_class_sq), ("iou", pan.per_class_iou)]
        for name, arr in percls:
            for c, v in enumerate(arr):
                f.write(f"{name},{CLASS_NAMES[c]},{fmt(v)}\n")
        for j, t in enumerate(AP_THRESHOLDS):
            for c in range(det.ap.shape[0]):
                f.write(f"ap@{t:g},{CLASS_NAMES[c]},{fmt(det.ap[c, j])}\n")
        for name, v in [("map", det.mean_ap), ("mate", det.mate),
                        ("mase", det.mase), ("maoe", det.maoe)]:
            f.write(f"{name},all,{fmt(v)}\n")
