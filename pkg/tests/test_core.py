import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from repurpose_loc.core import (
    ClipOutOfRange,
    InconsistentLabels,
    Interval,
    InvalidInterval,
    OverlappingClips,
    SegmentLabels,
    VideoSample,
    clips_to_labels,
    crop_video,
    giou_1d,
    labels_to_clips,
    tiou,
    tiou_matrix,
)


def iv(a, b):
    return Interval(float(a), float(b))


intervals = st.tuples(
    st.floats(0, 100, allow_nan=False), st.floats(0.01, 50, allow_nan=False)
).map(lambda p: Interval(p[0], p[0] + p[1]))


@pytest.mark.parametrize("bad", [(5, 5), (5, 4), (-1, 3), (0, math.inf)])
def test_interval_rejects_invalid(bad):
    with pytest.raises(InvalidInterval):
        Interval(*bad)


@pytest.mark.parametrize(
    "a, b, expected",
    [
        ((0, 10), (0, 10), 1.0),
        ((0, 10), (20, 30), 0.0),
        ((0, 10), (5, 15), 5 / 15),
        ((0, 10), (10, 20), 0.0),
    ],
)
def test_tiou_examples(a, b, expected):
    assert tiou(iv(*a), iv(*b)) == pytest.approx(expected, abs=1e-6)


@pytest.mark.parametrize(
    "a, b, expected",
    [
        ((0, 10), (0, 10), 1.0),
        ((0, 1), (2, 3), -1 / 3),
        ((0, 10), (5, 15), 1 / 3),
    ],
)
def test_giou_examples(a, b, expected):
    assert giou_1d(iv(*a), iv(*b)) == pytest.approx(expected, abs=1e-6)


@given(intervals, intervals)
def test_tiou_symmetric_and_bounded(a, b):
    v = tiou(a, b)
    assert v == tiou(b, a)
    assert 0.0 <= v <= 1.0


@given(intervals)
def test_tiou_identity(a):
    assert tiou(a, a) == 1.0


@given(intervals, intervals)
def test_giou_below_tiou_with_equality_iff_no_gap(a, b):
    g, t = giou_1d(a, b), tiou(a, b)
    assert g <= t + 1e-12
    hull = max(a.end, b.end) - min(a.start, b.start)
    union = a.length + b.length - max(0.0, min(a.end, b.end) - max(a.start, b.start))
    if math.isclose(hull, union, rel_tol=1e-12, abs_tol=1e-12):
        assert g == pytest.approx(t, abs=1e-12)
    else:
        assert g < t


def test_tiou_matrix_matches_scalar(rng):
    a = [iv(s, s + w) for s, w in zip(rng.uniform(0, 50, 7), rng.uniform(0.5, 20, 7))]
    b = [iv(s, s + w) for s, w in zip(rng.uniform(0, 50, 5), rng.uniform(0.5, 20, 5))]
    m = tiou_matrix(a, b)
    assert m.shape == (7, 5)
    for i in range(7):
        for j in range(5):
            assert m[i, j] == pytest.approx(tiou(a[i], b[j]), abs=1e-12)


def test_clips_to_labels_examples():
    labels = clips_to_labels([iv(10, 70)], 100, 1.0)
    assert labels.num_segments == 100
    assert labels.class_label[30] == 1
    assert labels.start_offset[30] == pytest.approx(20.5)
    assert labels.end_offset[30] == pytest.approx(39.5)
    assert labels.class_label[5] == 0
    assert labels.start_offset[5] == 0 and labels.end_offset[5] == 0
    assert not labels.valid_regression[5]

    empty = clips_to_labels([], 60, 1.0)
    assert empty.num_segments == 60
    assert empty.class_label.sum() == 0


def test_clips_to_labels_half_open_boundary():
    # segment 9 has center 9.5 and is outside [10, 20); segment 19 (19.5) is inside
    labels = clips_to_labels([iv(9.5, 19.5)], 30, 1.0)
    assert labels.class_label[9] == 1
    assert labels.class_label[19] == 0


def test_clips_to_labels_errors():
    with pytest.raises(OverlappingClips):
        clips_to_labels([iv(0, 10), iv(5, 15)], 30)
    with pytest.raises(ClipOutOfRange):
        clips_to_labels([iv(20, 40)], 30)


def _brute_force_labels(clips, duration, seg):
    t_count = int(math.floor(duration / seg + 1e-9))
    out = []
    for t in range(t_count):
        center = (t + 0.5) * seg
        hit = None
        for c in clips:
            if c.start <= center < c.end:
                hit = c
        out.append((1, center - hit.start, hit.end - center) if hit else (0, 0.0, 0.0))
    return out


@st.composite
def snapped_clip_sets(draw):
    seg = draw(st.sampled_from([0.5, 1.0, 2.0]))
    n_seg = draw(st.integers(10, 200))
    cuts = sorted(draw(st.sets(st.integers(0, n_seg), max_size=10)))
    clips = [iv(a * seg, b * seg) for a, b in zip(cuts[::2], cuts[1::2]) if b > a]
    return clips, n_seg * seg, seg


@settings(max_examples=200)
@given(snapped_clip_sets())
def test_clips_to_labels_matches_brute_force(case):
    clips, duration, seg = case
    labels = clips_to_labels(clips, duration, seg)
    ref = _brute_force_labels(clips, duration, seg)
    assert labels.class_label.sum() == sum(r[0] for r in ref)
    for t, (c, ds, de) in enumerate(ref):
        assert labels.class_label[t] == c
        assert labels.start_offset[t] == pytest.approx(ds, abs=1e-9)
        assert labels.end_offset[t] == pytest.approx(de, abs=1e-9)
    pos = labels.class_label == 1
    assert labels.valid_regression.tolist() == pos.tolist()


@settings(max_examples=200)
@given(snapped_clip_sets())
def test_label_round_trip(case):
    clips, duration, seg = case
    labels = clips_to_labels(clips, duration, seg)
    back = labels_to_clips(labels, seg)
    # adjacent clips merge into one run of positives, so compare against merged runs
    merged = []
    for c in clips:
        if merged and merged[-1][1] == c.start:
            merged[-1] = (merged[-1][0], c.end)
        else:
            merged.append((c.start, c.end))
    if len(merged) == len(clips):
        assert len(back) == len(clips)
        for c, b in zip(clips, back):
            assert abs(c.start - b.start) <= seg / 2
            assert abs(c.end - b.end) <= seg / 2


def test_labels_to_clips_examples():
    assert labels_to_clips(clips_to_labels([iv(10, 70)], 100, 1.0)) == [iv(10, 70)]
    assert labels_to_clips(SegmentLabels.empty(20)) == []
    back = labels_to_clips(clips_to_labels([iv(5, 20), iv(40, 55)], 60, 1.0))
    assert [c.as_tuple() for c in back] == [(5, 20), (40, 55)]


def test_labels_to_clips_rejects_inconsistent_runs():
    labels = clips_to_labels([iv(10, 30)], 40, 1.0)
    labels.start_offset[15] += 3.0
    with pytest.raises(InconsistentLabels):
        labels_to_clips(labels)


def test_crop_video_shifts_clips_and_features():
    rng = np.random.default_rng(0)
    t = 50
    v = VideoSample("v", 50.4, rng.standard_normal((t, 3)), rng.standard_normal((t, 2)), rng.standard_normal((t, 2)),
                    clips=[Interval(5.0, 12.5), Interval(30.0, 44.0)],
                    caption_spans=[(Interval(10.0, 21.0), "a")])
    c = crop_video(v, 20, 50)
    assert c.duration == pytest.approx(30.4)
    assert c.clips == [Interval(10.0, 24.0)]
    assert c.caption_spans == [(Interval(0.0, 1.0), "a")]
    assert np.array_equal(c.visual_features, v.visual_features[20:])
    lab, full = c.labels(), v.labels()
    assert np.array_equal(lab.class_label, full.class_label[20:])
    with pytest.raises(ValueError):
        crop_video(v, 8, 40)
