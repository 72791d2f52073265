"""Pure-Python/numpy versions of the hot post-processing kernels.

Signatures and results match the compiled ``_ckernels`` module exactly; this
module is used whenever the extension is unavailable.
"""

from __future__ import annotations

import math

import numpy as np


def tiou_matrix(a_start, a_end, b_start, b_end):
    a_start = np.asarray(a_start, dtype=np.float64)[:, None]
    a_end = np.asarray(a_end, dtype=np.float64)[:, None]
    b_start = np.asarray(b_start, dtype=np.float64)[None, :]
    b_end = np.asarray(b_end, dtype=np.float64)[None, :]
    inter = np.clip(np.minimum(a_end, b_end) - np.maximum(a_start, b_start), 0.0, None)
    union = (a_end - a_start) + (b_end - b_start) - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(inter > 0, inter / union, 0.0)
    return out


def _pair_tiou(s1, e1, s2, e2):
    inter = min(e1, e2) - max(s1, s2)
    if inter <= 0:
        return 0.0
    return inter / ((e1 - s1) + (e2 - s2) - inter)


def soft_nms(starts, ends, scores, source, sigma, score_floor):
    """Gaussian soft-NMS.

    Returns ``(order, final_scores)``: indices into the inputs in selection
    order and the score each one held when selected.
    """
    starts = np.asarray(starts, dtype=np.float64)
    ends = np.asarray(ends, dtype=np.float64)
    cur = np.array(scores, dtype=np.float64)
    source = np.asarray(source, dtype=np.int64)
    alive = [i for i in range(len(cur)) if cur[i] >= score_floor]
    order = []
    final = []
    while alive:
        best = alive[0]
        for i in alive[1:]:
            if (cur[i], -starts[i], -source[i]) > (cur[best], -starts[best], -source[best]):
                best = i
        order.append(best)
        final.append(cur[best])
        survivors = []
        for i in alive:
            if i == best:
                continue
            ov = _pair_tiou(starts[best], ends[best], starts[i], ends[i])
            cur[i] *= math.exp(-(ov * ov) / sigma)
            if cur[i] >= score_floor:
                survivors.append(i)
        alive = survivors
    return np.array(order, dtype=np.int64), np.array(final, dtype=np.float64)


def greedy_match(pred_video, pred_start, pred_end, gt_ptr, gt_start, gt_end, threshold):
    """Mark each ranked prediction as a true positive or not.

    ``gt_ptr`` is a CSR offset array: ground truth of video ``v`` occupies
    ``gt_ptr[v]:gt_ptr[v + 1]``. Each prediction takes the unmatched ground
    truth with the highest tIoU in its video; it is a hit when that tIoU
    reaches ``threshold``.
    """
    n = len(pred_video)
    used = np.zeros(len(gt_start), dtype=bool)
    tp = np.zeros(n, dtype=bool)
    for k in range(n):
        v = pred_video[k]
        best = -1
        best_ov = -1.0
        for g in range(gt_ptr[v], gt_ptr[v + 1]):
            if used[g]:
                continue
            ov = _pair_tiou(pred_start[k], pred_end[k], gt_start[g], gt_end[g])
            if ov > best_ov:
                best_ov = ov
                best = g
        if best >= 0 and best_ov >= threshold:
            used[best] = True
            tp[k] = True
    return tp
