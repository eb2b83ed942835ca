"""Evaluation metrics: panoptic quality and center-distance detection AP.

Everything here is deliberately small-scale python: segment matching uses
integer pair counts (so IoU values are single exact divisions) and the
precision-recall machinery accumulates in plain python floats, which makes
the numbers reproducible bit for bit against the brute-force reference
matchers in the tests.
"""

import math
from dataclasses import dataclass

import numpy as np

from .boxes import wrap_angle


@dataclass
class PanopticScore:
    """All values are percentages in [0, 100]; per-class arrays hold NaN
    where a class has no segments on either side."""

    pq: float
    rq: float
    sq: float
    pq_things: float
    pq_stuff: float
    miou: float
    per_class_pq: np.ndarray
    per_class_rq: np.ndarray
    per_class_sq: np.ndarray
    per_class_iou: np.ndarray


def _mean_defined(values):
    vals = [v for v in values if not math.isnan(v)]
    if not vals:
        return 0.0
    return sum(vals) / len(vals)


def _class_segments(sem, inst, c, thing):
    """Segment id -> area. Things: one segment per instance id > 0; stuff:
    a single segment 0 spanning every point of the class."""
    m = sem == c
    if not thing:
        n = int(m.sum())
        return {0: n} if n else {}
    m = m & (inst > 0)
    ids, counts = np.unique(inst[m], return_counts=True)
    return {int(i): int(n) for i, n in zip(ids, counts)}


def panoptic_quality(pred_sem, pred_inst, gt_sem, gt_inst, n_classes,
                     thing_classes, void=255):
    """Point-level panoptic quality with the standard IoU > 0.5 matching.

    Segments of thing classes are (class, instance>0) groups; each stuff
    class forms at most one segment per call. Points whose GT semantic
    label equals `void` are dropped entirely before scoring. PQ per class
    is sum(IoU of matches) / (TP + FP/2 + FN/2); means skip undefined
    classes.
    """
    pred_sem, pred_inst, gt_sem, gt_inst = (
        np.asarray(a).ravel() for a in (pred_sem, pred_inst, gt_sem, gt_inst))
    if not (len(pred_sem) == len(pred_inst) == len(gt_sem) == len(gt_inst)):
        raise ValueError("label arrays must have equal length")
    keep = gt_sem != void
    pred_sem, pred_inst = pred_sem[keep], pred_inst[keep]
    gt_sem, gt_inst = gt_sem[keep], gt_inst[keep]
    things = set(int(c) for c in thing_classes)

    pq = np.full(n_classes, np.nan)
    rq = np.full(n_classes, np.nan)
    sq = np.full(n_classes, np.nan)
    for c in range(n_classes):
        thing = c in things
        pareas = _class_segments(pred_sem, pred_inst, c, thing)
        gareas = _class_segments(gt_sem, gt_inst, c, thing)
        if not pareas and not gareas:
            continue
        # intersections restricted to points carrying a segment on both sides
        both = (pred_sem == c) & (gt_sem == c)
        if thing:
            both = both & (pred_inst > 0) & (gt_inst > 0)
        pi = pred_inst[both] if thing else np.zeros(int(both.sum()), np.int64)
        gi = gt_inst[both] if thing else np.zeros(int(both.sum()), np.int64)
        inter = {}
        if pi.size:
            span = int(gi.max()) + 1
            pairs, counts = np.unique(pi.astype(np.int64) * span + gi,
                                      return_counts=True)
            inter = {(int(p) // span, int(p) % span): int(n)
                     for p, n in zip(pairs, counts)}

        matches = []
        matched_g = set()
        for p_id in sorted(pareas):
            for g_id in sorted(gareas):
                ov = inter.get((p_id, g_id), 0)
                iou = ov / (pareas[p_id] + gareas[g_id] - ov)
                if iou > 0.5:
                    matches.append(iou)
                    matched_g.add(g_id)
                    break  # IoU > 0.5 matches are unique
        tp = len(matches)
        # fsum: correctly rounded, so scores ignore segment id ordering
        iou_sum = math.fsum(matches)
        fp = len(pareas) - tp
        fn = len(gareas) - len(matched_g)
        denom = tp + 0.5 * fp + 0.5 * fn
        pq[c] = 100.0 * iou_sum / denom
        rq[c] = 100.0 * tp / denom
        sq[c] = 100.0 * iou_sum / tp if tp else 0.0

    iou_cls = _semantic_iou(pred_sem, gt_sem, n_classes)
    return PanopticScore(
        pq=_mean_defined(pq), rq=_mean_defined(rq), sq=_mean_defined(sq),
        pq_things=_mean_defined([pq[c] for c in range(n_classes)
                                 if c in things]),
        pq_stuff=_mean_defined([pq[c] for c in range(n_classes)
                                if c not in things]),
        miou=_mean_defined(iou_cls),
        per_class_pq=pq, per_class_rq=rq, per_class_sq=sq,
        per_class_iou=np.asarray(iou_cls))


def _semantic_iou(pred_sem, gt_sem, n_classes):
    """Per-class intersection over union in percent; NaN when the class
    appears on neither side. Out-of-range predictions count as errors."""
    pred = np.where((pred_sem >= 0) & (pred_sem < n_classes),
                    pred_sem, n_classes)
    conf = np.zeros((n_classes + 1, n_classes), dtype=np.int64)
    np.add.at(conf, (pred, gt_sem), 1)
    out = []
    for c in range(n_classes):
        tp = int(conf[c, c])
        union = int(conf[c].sum()) + int(conf[:, c].sum()) - tp
        out.append(100.0 * tp / union if union else float("nan"))
    return out


@dataclass
class DetectionScore:
    ap: np.ndarray        # [n_classes, n_thresholds]; NaN = class absent from GT
    mean_ap: float
    mate: float           # mean center distance of TPs (m)
    mase: float           # mean 1 - IoU of center/yaw-aligned TP boxes
    maoe: float           # mean absolute yaw difference of TPs (rad)


def _ap_from_flags(flags, npos):
    """nuScenes-style AP: 101-point interpolated precision, recall and
    precision floored at 0.1, renormalized by 0.9."""
    if npos == 0:
        return float("nan")
    if not flags:
        return 0.0
    prec, rec = [], []
    tp = 0
    for i, f in enumerate(flags):
        tp += 1 if f else 0
        prec.append(tp / (i + 1))
        rec.append(tp / npos)
    samples = np.interp(np.linspace(0.0, 1.0, 101), rec, prec, right=0.0)
    clipped = [max(0.0, v - 0.1) for v in samples[11:]]
    return sum(clipped) / len(clipped) / 0.9


def _match_class(dets, gts, c, thresh):
    """Greedy nearest-unmatched matching at one distance threshold.

    dets/gts: per-scene box lists. Returns (flags, pairs): flags are TP
    booleans in global descending-score order (ties by scene then input
    order); pairs are (det, gt, squared distance) for the TPs.
    """
    order = []
    for s, scene in enumerate(dets):
        for i, d in enumerate(scene):
            if d.cls == c:
                order.append((-d.score, s, i, d))
    order.sort(key=lambda t: t[:3])

    cand = [[(i, g) for i, g in enumerate(scene) if g.cls == c]
            for scene in gts]
    matched = [set() for _ in gts]
    flags, pairs = [], []
    t2 = thresh * thresh
    for _, s, _, d in order:
        best = None
        for gi, g in cand[s]:
            if gi in matched[s]:
                continue
            dx, dy = d.x - g.x, d.y - g.y
            d2 = dx * dx + dy * dy
            if d2 < t2 and (best is None or d2 < best[0]):
                best = (d2, gi, g)
        if best is None:
            flags.append(False)
        else:
            matched[s].add(best[1])
            flags.append(True)
            pairs.append((d, best[2], best[0]))
    return flags, pairs


def _aligned_size_iou(a, b):
    inter = min(a.l, b.l) * min(a.w, b.w) * min(a.h, b.h)
    union = a.l * a.w * a.h + b.l * b.w * b.h - inter
    return inter / union


def average_precision(dets, gts, n_classes,
                      thresholds=(0.5, 1.0, 2.0, 4.0), tp_threshold=2.0):
    """Center-distance AP over aligned per-scene box lists.

    AP per class and threshold via greedy matching in descending score
    order; mean_ap averages the defined entries. mATE/mASE/mAOE are means
    over the true positives of the `tp_threshold` pass, per class, then
    averaged over classes that have any; 0.0 if none do.
    """
    if len(dets) != len(gts):
        raise ValueError("detections and ground truth must pair per scene")
    ap = np.full((n_classes, len(thresholds)), np.nan)
    ate, ase, aoe = [], [], []
    for c in range(n_classes):
        npos = sum(1 for scene in gts for g in scene if g.cls == c)
        for j, th in enumerate(thresholds):
            flags, _ = _match_class(dets, gts, c, th)
            ap[c, j] = _ap_from_flags(flags, npos)
        _, pairs = _match_class(dets, gts, c, tp_threshold)
        if pairs:
            ate.append(sum(math.sqrt(d2) for _, _, d2 in pairs) / len(pairs))
            ase.append(sum(1.0 - _aligned_size_iou(d, g)
                           for d, g, _ in pairs) / len(pairs))
            aoe.append(sum(abs(float(wrap_angle(d.yaw - g.yaw)))
                           for d, g, _ in pairs) / len(pairs))
    defined = [float(v) for v in ap.ravel() if not math.isnan(v)]
    mean_ap = sum(defined) / len(defined) if defined else 0.0
    mean_or_zero = lambda xs: sum(xs) / len(xs) if xs else 0.0
    return DetectionScore(ap=ap, mean_ap=mean_ap, mate=mean_or_zero(ate),
                          mase=mean_or_zero(ase), maoe=mean_or_zero(aoe))
