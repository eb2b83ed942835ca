"""Loss functions, composed from the differentiable primitives in ops.

All losses take a Tensor prediction and plain numpy targets/masks (targets
never need gradients) and return a scalar Tensor.
"""

import numpy as np

from . import ops
from .tensor import Tensor, as_tensor


def focal_heatmap_loss(scores, target, alpha=2.0, beta=4.0, eps=1e-6):
    """Penalty-reduced focal loss for peak heatmaps.

    scores: Tensor in (0,1) (post-sigmoid), any shape.
    target: numpy array, same shape, values in [0,1]; cells equal to 1 are
        positives, everything else is a distance-weighted negative.
    Normalized by the positive count (floored at 1).
    """
    target = np.asarray(target, dtype=scores.dtype)
    pos = (target >= 1.0).astype(scores.dtype)
    neg_w = ((1.0 - target) ** beta) * (1.0 - pos)
    npos = max(1.0, float(pos.sum()))

    p = ops.clip(scores, eps, 1.0 - eps)
    one_m_p = 1.0 - p
    pos_term = ops.tensor_sum(as_tensor(pos) * (one_m_p * one_m_p) * ops.log(p))
    neg_term = ops.tensor_sum(as_tensor(neg_w) * (p * p) * ops.log(one_m_p))
    return -(pos_term + neg_term) * (1.0 / npos)


def cross_entropy(logits, target, weight=None, ignore_index=None):
    """Mean softmax cross-entropy over rows.

    logits: Tensor [N, C]; target: int array [N]; weight: optional per-class
    array [C]; rows whose target equals ignore_index contribute nothing.
    """
    target = np.asarray(target, dtype=np.int64)
    n, c = logits.shape
    w_row = np.ones(n, dtype=logits.dtype)
    if ignore_index is not None:
        w_row = w_row * (target != ignore_index)
    safe = np.where(target == (ignore_index if ignore_index is not None else -1),
                    0, target)
    if weight is not None:
        w_row = w_row * np.asarray(weight, dtype=logits.dtype)[safe]
    denom = max(float(w_row.sum()), 1e-12)

    shift = logits.data.max(axis=1, keepdims=True)
    z = logits - shift
    lse = ops.log(ops.tensor_sum(ops.exp(z), axis=1, keepdims=True))
    logp = z - ops.broadcast_to(lse, z.shape)
    pick = np.zeros((n, c), dtype=logits.dtype)
    pick[np.arange(n), safe] = w_row
    return -ops.tensor_sum(logp * as_tensor(pick)) * (1.0 / denom)


def l1_loss(pred, target, mask=None):
    """Mean absolute error; with a mask, the mean runs over masked entries
    (mask broadcast against pred, count floored at 1)."""
    target = np.asarray(target, dtype=pred.dtype)
    diff = ops.absolute(pred - target)
    if mask is None:
        return ops.tensor_mean(diff)
    mask = np.asarray(mask, dtype=pred.dtype)
    full = np.broadcast_to(mask, pred.shape)
    return ops.tensor_sum(diff * as_tensor(full)) * (1.0 / max(1.0, float(full.sum())))


def l2_offset_loss(pred, target, mask):
    """Masked mean squared offset error.

    pred/target: [2, H, W]; mask: [H, W]. Squared error is summed over the
    two components, then averaged over masked pixels (floored at 1).
    """
    target = np.asarray(target, dtype=pred.dtype)
    mask = np.asarray(mask, dtype=pred.dtype)
    diff = pred - target
    sq = diff * diff
    return ops.tensor_sum(sq * as_tensor(mask[None])) * (1.0 / max(1.0, float(mask.sum())))
