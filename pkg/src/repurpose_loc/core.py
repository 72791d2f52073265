"""Domain types and 1-D interval algebra.

Timestamps are seconds from the start of the video. A video is cut into
fixed-length segments; segment ``t`` is anchored at its center
``(t + 0.5) * segment_length``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels


class ReproError(Exception):
    """Base class for errors raised by this package."""


class InvalidInterval(ReproError, ValueError):
    pass


class OverlappingClips(ReproError, ValueError):
    pass


class ClipOutOfRange(ReproError, ValueError):
    pass


class InconsistentLabels(ReproError, ValueError):
    pass


class ShapeMismatch(ReproError, ValueError):
    pass


@dataclass(frozen=True, order=True)
class Interval:
    start: float
    end: float

    def __post_init__(self):
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise InvalidInterval(f"non-finite interval [{self.start}, {self.end}]")
        if self.start < 0:
            raise InvalidInterval(f"interval starts before 0: {self.start}")
        if not self.end > self.start:
            raise InvalidInterval(f"interval [{self.start}, {self.end}] has non-positive length")

    @property
    def length(self) -> float:
        return self.end - self.start

    def as_tuple(self) -> tuple[float, float]:
        return (self.start, self.end)


def tiou(a: Interval, b: Interval) -> float:
    """Temporal intersection over union of two intervals."""
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0:
        return 0.0
    union = a.length + b.length - inter
    return inter / union


def giou_1d(a: Interval, b: Interval) -> float:
    """Generalized IoU in one dimension.

    Subtracts the fraction of the enclosing hull not covered by either
    interval, so disjoint pairs score below zero.
    """
    inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    union = a.length + b.length - inter
    hull = max(a.end, b.end) - min(a.start, b.start)
    return inter / union - (hull - union) / hull


def tiou_matrix(a: Sequence[Interval], b: Sequence[Interval]) -> np.ndarray:
    """Pairwise tIoU, shape ``[len(a), len(b)]``."""
    a_arr = np.array([x.as_tuple() for x in a], dtype=np.float64).reshape(-1, 2)
    b_arr = np.array([x.as_tuple() for x in b], dtype=np.float64).reshape(-1, 2)
    return kernels.tiou_matrix(a_arr[:, 0], a_arr[:, 1], b_arr[:, 0], b_arr[:, 1])


def segment_centers(num_segments: int, segment_length: float) -> np.ndarray:
    return (np.arange(num_segments, dtype=np.float64) + 0.5) * segment_length


def num_segments_for(duration: float, segment_length: float) -> int:
    # guard against 599.9999999 / 1.0 style float noise
    return int(math.floor(duration / segment_length + 1e-9))


@dataclass(frozen=True)
class SegmentLabels:
    """Per-segment classification and offset-regression targets."""

    class_label: np.ndarray
    start_offset: np.ndarray
    end_offset: np.ndarray
    valid_regression: np.ndarray

    def __post_init__(self):
        n = len(self.class_label)
        for name in ("start_offset", "end_offset", "valid_regression"):
            if len(getattr(self, name)) != n:
                raise ShapeMismatch(f"{name} has length {len(getattr(self, name))}, expected {n}")

    @property
    def num_segments(self) -> int:
        return len(self.class_label)

    @classmethod
    def empty(cls, num_segments: int) -> "SegmentLabels":
        return cls(
            class_label=np.zeros(num_segments, dtype=np.int64),
            start_offset=np.zeros(num_segments, dtype=np.float64),
            end_offset=np.zeros(num_segments, dtype=np.float64),
            valid_regression=np.zeros(num_segments, dtype=bool),
        )


def _sorted_disjoint(clips: Sequence[Interval]) -> list[Interval]:
    ordered = sorted(clips)
    for prev, cur in zip(ordered, ordered[1:]):
        if cur.start < prev.end:
            raise OverlappingClips(f"clips {prev.as_tuple()} and {cur.as_tuple()} overlap")
    return ordered


def clips_to_labels(clips: Sequence[Interval], duration: float, segment_length: float = 1.0) -> SegmentLabels:
    """Convert ground-truth clips to dense per-segment targets.

    A segment is positive when its center falls in ``[clip.start, clip.end)``.
    Offsets are the distances in seconds from the center to the clip edges.
    """
    if duration <= 0:
        raise ValueError(f"duration must be positive, got {duration}")
    if segment_length <= 0:
        raise ValueError(f"segment_length must be positive, got {segment_length}")
    ordered = _sorted_disjoint(clips)
    for clip in ordered:
        if clip.end > duration + 1e-9:
            raise ClipOutOfRange(f"clip {clip.as_tuple()} exceeds video duration {duration}")

    labels = SegmentLabels.empty(num_segments_for(duration, segment_length))
    tau = segment_centers(labels.num_segments, segment_length)
    for clip in ordered:
        inside = (tau >= clip.start) & (tau < clip.end)
        labels.class_label[inside] = 1
        labels.valid_regression[inside] = True
        labels.start_offset[inside] = tau[inside] - clip.start
        labels.end_offset[inside] = clip.end - tau[inside]
    return labels


def labels_to_clips(labels: SegmentLabels, segment_length: float = 1.0) -> list[Interval]:
    """Rebuild clips from each maximal run of positive segments.

    The first member of a run defines the clip; every other member must agree
    with it to within one segment.
    """
    positive = np.asarray(labels.class_label).astype(bool)
    tau = segment_centers(labels.num_segments, segment_length)
    clips = []
    t = 0
    n = labels.num_segments
    while t < n:
        if not positive[t]:
            t += 1
            continue
        run_end = t
        while run_end + 1 < n and positive[run_end + 1]:
            run_end += 1
        starts = tau[t : run_end + 1] - labels.start_offset[t : run_end + 1]
        ends = tau[t : run_end + 1] + labels.end_offset[t : run_end + 1]
        if np.ptp(starts) > segment_length or np.ptp(ends) > segment_length:
            raise InconsistentLabels(
                f"segments {t}..{run_end} disagree on clip boundary "
                f"(start spread {np.ptp(starts):.3f}s, end spread {np.ptp(ends):.3f}s)"
            )
        clips.append(Interval(max(0.0, float(starts[0])), float(ends[0])))
        t = run_end + 1
    return sorted(clips)


@dataclass
class VideoSample:
    """One long video with segment-aligned features and annotations.

    ``caption_empty`` flags segments with no overlapping caption; the model
    swaps in its learned empty-token embedding there.
    """

    video_id: str
    duration: float
    visual_features: np.ndarray
    audio_features: np.ndarray
    caption_features: np.ndarray
    clips: list[Interval] = field(default_factory=list)
    caption_spans: list[tuple[Interval, str]] = field(default_factory=list)
    caption_empty: np.ndarray | None = None
    segment_length: float = 1.0
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        t = num_segments_for(self.duration, self.segment_length)
        for name in ("visual_features", "audio_features", "caption_features"):
            arr = getattr(self, name)
            if arr.ndim != 2 or arr.shape[0] != t:
                raise ShapeMismatch(f"{self.video_id}: {name} has shape {arr.shape}, expected {t} rows")
        if self.caption_empty is None:
            self.caption_empty = np.zeros(t, dtype=bool)
        elif len(self.caption_empty) != t:
            raise ShapeMismatch(f"{self.video_id}: caption_empty has length {len(self.caption_empty)}, expected {t}")
        for clip in self.clips:
            if clip.end > self.duration + 1e-9:
                raise ClipOutOfRange(f"{self.video_id}: clip {clip.as_tuple()} exceeds duration {self.duration}")

    @property
    def num_segments(self) -> int:
        return self.visual_features.shape[0]

    @property
    def feature_dims(self) -> tuple[int, int, int]:
        return (self.visual_features.shape[1], self.audio_features.shape[1], self.caption_features.shape[1])

    def labels(self) -> SegmentLabels:
        return clips_to_labels(self.clips, self.duration, self.segment_length)


def crop_video(sample: VideoSample, first: int, stop: int) -> VideoSample:
    """Segments ``[first, stop)`` of ``sample`` as a new video starting at 0.

    The cut points must not fall strictly inside a clip; clips outside the
    window are dropped and caption spans are clipped to it.
    """
    t = sample.num_segments
    if not 0 <= first < stop <= t:
        raise ValueError(f"bad crop [{first}, {stop}) of {t} segments")
    seg = sample.segment_length
    lo = first * seg
    hi = sample.duration if stop == t else stop * seg
    for clip in sample.clips:
        if clip.start < lo < clip.end or clip.start < hi < clip.end:
            raise ValueError(f"crop [{lo}, {hi}) cuts clip {clip.as_tuple()}")
    clips = [Interval(c.start - lo, c.end - lo) for c in sample.clips if c.start >= lo and c.end <= hi]
    spans = [
        (Interval(max(iv.start, lo) - lo, min(iv.end, hi) - lo), text)
        for iv, text in sample.caption_spans
        if min(iv.end, hi) > max(iv.start, lo)
    ]
    return VideoSample(
        video_id=sample.video_id,
        duration=hi - lo,
        visual_features=sample.visual_features[first:stop],
        audio_features=sample.audio_features[first:stop],
        caption_features=sample.caption_features[first:stop],
        clips=clips,
        caption_spans=spans,
        caption_empty=sample.caption_empty[first:stop],
        segment_length=seg,
    )


__all__ = [
    "ClipOutOfRange",
    "InconsistentLabels",
    "Interval",
    "InvalidInterval",
    "OverlappingClips",
    "ReproError",
    "SegmentLabels",
    "ShapeMismatch",
    "VideoSample",
    "crop_video",
    "clips_to_labels",
    "giou_1d",
    "labels_to_clips",
    "num_segments_for",
    "segment_centers",
    "tiou",
    "tiou_matrix",
]
