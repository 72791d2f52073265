"""Turn dense per-segment outputs into ranked clips and score them.

Pipeline per video: threshold the fused probability, decode each surviving
segment's offsets into a candidate clip, merge exact duplicates, apply
Gaussian soft-NMS, keep the top ``k`` (3 per 10 minutes). Scoring pools every
video's predictions into one ranking and computes all-point interpolated AP
at tIoU 0.5, 0.6, 0.7, 0.8 and 0.9.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .core import Interval, ReproError, segment_centers

TIOU_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)
CLIPS_PER_TEN_MINUTES = 3.0


class VideoIdMismatch(ReproError, KeyError):
    pass


@dataclass(frozen=True)
class ClipPrediction:
    interval: Interval
    score: float
    source_segment: int = -1

    @property
    def start(self) -> float:
        return self.interval.start

    @property
    def end(self) -> float:
        return self.interval.end

    def to_json(self) -> dict:
        return {"start": self.interval.start, "end": self.interval.end, "score": self.score}


def _np(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def decode(output, segment_length: float, duration: float, conf_threshold: float = 0.5) -> list[ClipPrediction]:
    """Candidate clips from one video's fused probabilities and offsets.

    ``output`` needs ``prob_fused``, ``start_offset`` and ``end_offset``
    (length-T arrays or tensors).
    """
    probs = _np(output.prob_fused)
    d_s = _np(output.start_offset)
    d_e = _np(output.end_offset)
    tau = segment_centers(len(probs), segment_length)
    out = []
    for t in np.flatnonzero(probs >= conf_threshold):
        start = max(0.0, tau[t] - d_s[t])
        end = min(duration, tau[t] + d_e[t])
        if end > start:
            out.append(ClipPrediction(Interval(float(start), float(end)), float(probs[t]), int(t)))
    return out


def merge_duplicates(candidates: Sequence[ClipPrediction], decimals: int = 6) -> list[ClipPrediction]:
    """Collapse candidates with the same interval, keeping the best score."""
    best: dict[tuple[float, float], ClipPrediction] = {}
    for c in candidates:
        key = (round(c.start, decimals), round(c.end, decimals))
        cur = best.get(key)
        if cur is None or c.score > cur.score or (c.score == cur.score and c.source_segment < cur.source_segment):
            best[key] = c
    return list(best.values())


def soft_nms(candidates: Sequence[ClipPrediction], sigma: float = 0.5, score_floor: float = 0.001) -> list[ClipPrediction]:
    """Gaussian soft-NMS: each pick multiplies the rest by ``exp(-tiou**2 / sigma)``."""
    if not candidates:
        return []
    starts = np.array([c.start for c in candidates])
    ends = np.array([c.end for c in candidates])
    scores = np.array([c.score for c in candidates])
    source = np.array([c.source_segment for c in candidates], dtype=np.int64)
    order, final = kernels.soft_nms(starts, ends, scores, source, float(sigma), float(score_floor))
    return [ClipPrediction(candidates[i].interval, float(s), candidates[i].source_segment) for i, s in zip(order, final)]


def top_k_for_duration(duration: float) -> int:
    return max(1, int(math.floor(CLIPS_PER_TEN_MINUTES * duration / 600.0 + 0.5)))


def postprocess(
    output,
    segment_length: float,
    duration: float,
    *,
    conf_threshold: float = 0.5,
    sigma: float = 0.5,
    score_floor: float = 0.001,
) -> list[ClipPrediction]:
    candidates = merge_duplicates(decode(output, segment_length, duration, conf_threshold))
    kept = soft_nms(candidates, sigma=sigma, score_floor=score_floor)
    return kept[: top_k_for_duration(duration)]


def _pooled_ranking(predictions: Mapping[str, Sequence[ClipPrediction]], video_ids: Sequence[str]):
    index = {v: i for i, v in enumerate(video_ids)}
    rows = []
    for vid, preds in predictions.items():
        if vid not in index:
            raise VideoIdMismatch(f"predictions for unknown video {vid!r}")
        for p in preds:
            rows.append((-p.score, index[vid], p.start, p.end))
    rows.sort()
    return rows


def average_precision(
    predictions: Mapping[str, Sequence[ClipPrediction]],
    ground_truth: Mapping[str, Sequence[Interval]],
    tiou_threshold: float,
) -> float:
    """Detection AP over a pooled, score-ranked list of all videos' predictions.

    Ties in score are broken by video order in ``ground_truth`` then start
    time, so the result does not depend on dict ordering of ``predictions``.
    """
    video_ids = list(ground_truth)
    rows = _pooled_ranking(predictions, video_ids)
    n_gt = sum(len(ground_truth[v]) for v in video_ids)
    if not rows or n_gt == 0:
        return 0.0
    gt_ptr = np.zeros(len(video_ids) + 1, dtype=np.int64)
    gt_ptr[1:] = np.cumsum([len(ground_truth[v]) for v in video_ids])
    gt_start = np.array([iv.start for v in video_ids for iv in ground_truth[v]], dtype=np.float64)
    gt_end = np.array([iv.end for v in video_ids for iv in ground_truth[v]], dtype=np.float64)
    pv = np.array([r[1] for r in rows], dtype=np.int64)
    ps = np.array([r[2] for r in rows], dtype=np.float64)
    pe = np.array([r[3] for r in rows], dtype=np.float64)
    tp = kernels.greedy_match(pv, ps, pe, gt_ptr, gt_start, gt_end, float(tiou_threshold))
    return ap_from_hits(tp, n_gt)


def ap_from_hits(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP from ranked hit flags."""
    tp = np.asarray(tp, dtype=np.float64)
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    recall_steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(recall_steps * envelope))


@dataclass
class EvalReport:
    ap_per_threshold: dict[float, float]
    average: float
    per_video: list[dict] = field(default_factory=list)

    @classmethod
    def from_ap(cls, ap: Mapping[float, float], per_video: list[dict] | None = None) -> "EvalReport":
        ap = {float(t): float(ap[t]) for t in TIOU_THRESHOLDS}
        return cls(ap, float(np.mean(list(ap.values()))), per_video or [])

    def to_json(self) -> dict:
        return {
            "ap_per_threshold": {f"{t:.1f}": self.ap_per_threshold[t] for t in TIOU_THRESHOLDS},
            "average": self.average,
            "per_video": self.per_video,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2) + "\n"

    @classmethod
    def from_json(cls, raw: dict) -> "EvalReport":
        ap = {float(k): float(v) for k, v in raw["ap_per_threshold"].items()}
        return cls(ap, float(raw["average"]), list(raw.get("per_video", [])))

    def table(self, label: str = "model") -> str:
        header = f"{'':<12}" + "".join(f"{t:>8.1f}" for t in TIOU_THRESHOLDS) + f"{'Avg.':>8}"
        row = f"{label:<12}" + "".join(f"{100 * self.ap_per_threshold[t]:>8.2f}" for t in TIOU_THRESHOLDS)
        return header + "\n" + row + f"{100 * self.average:>8.2f}\n"


def score_predictions(
    predictions: Mapping[str, Sequence[ClipPrediction]],
    ground_truth: Mapping[str, Sequence[Interval]],
) -> EvalReport:
    ap = {t: average_precision(predictions, ground_truth, t) for t in TIOU_THRESHOLDS}
    per_video = []
    for vid in sorted(ground_truth):
        preds = predictions.get(vid, [])
        gts = ground_truth[vid]
        if preds and gts:
            best = np.max(kernels.tiou_matrix(
                np.array([g.start for g in gts]), np.array([g.end for g in gts]),
                np.array([p.start for p in preds]), np.array([p.end for p in preds]),
            ), axis=1).tolist()
        else:
            best = [0.0] * len(gts)
        per_video.append({"video_id": vid, "num_predictions": len(preds), "num_gt": len(gts), "best_tiou_per_gt": best})
    return EvalReport.from_ap(ap, per_video)


def prediction_dump(video_id: str, predictions: Sequence[ClipPrediction]) -> dict:
    return {"video_id": video_id, "predictions": [p.to_json() for p in predictions]}


def oracle_outputs(video):
    """Model-shaped outputs built from ground truth (upper-bound sanity check)."""
    from types import SimpleNamespace

    labels = video.labels()
    prob = labels.class_label.astype(np.float64)
    return SimpleNamespace(
        prob_visual=prob, prob_audio=prob, prob_fused=prob,
        start_offset=labels.start_offset, end_offset=labels.end_offset,
    )


def predict_videos(model, videos, *, batch_size: int = 4, **post_kw) -> dict[str, list[ClipPrediction]]:
    """Run ``model`` (or the string ``"oracle"``) over videos and postprocess."""
    if isinstance(model, str) and model == "oracle":
        return {v.video_id: postprocess(oracle_outputs(v), v.segment_length, v.duration, **post_kw) for v in videos}
    from .model import predict_outputs

    outputs = predict_outputs(model, videos, batch_size=batch_size)
    return {v.video_id: postprocess(o, v.segment_length, v.duration, **post_kw) for v, o in zip(videos, outputs)}


def evaluate(model, videos, *, batch_size: int = 4, **post_kw) -> EvalReport:
    """Forward, postprocess and score a list of videos."""
    predictions = predict_videos(model, videos, batch_size=batch_size, **post_kw)
    return score_predictions(predictions, {v.video_id: list(v.clips) for v in videos})


__all__ = [
    "ClipPrediction",
    "EvalReport",
    "TIOU_THRESHOLDS",
    "VideoIdMismatch",
    "ap_from_hits",
    "average_precision",
    "decode",
    "evaluate",
    "merge_duplicates",
    "oracle_outputs",
    "postprocess",
    "predict_videos",
    "prediction_dump",
    "score_predictions",
    "soft_nms",
    "top_k_for_duration",
]
