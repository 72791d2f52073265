import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from types import SimpleNamespace

from repurpose_loc.core import Interval, clips_to_labels, tiou
from repurpose_loc.evaluation import (
    TIOU_THRESHOLDS,
    ClipPrediction,
    EvalReport,
    VideoIdMismatch,
    average_precision,
    decode,
    evaluate,
    merge_duplicates,
    oracle_outputs,
    postprocess,
    soft_nms,
    top_k_for_duration,
)


def _out(probs, ds, de):
    return SimpleNamespace(prob_fused=np.asarray(probs, float), start_offset=np.asarray(ds, float),
                           end_offset=np.asarray(de, float))


def _pred(s, e, score, src=-1):
    return ClipPrediction(Interval(s, e), score, src)


# -- decode ----------------------------------------------------------------


def test_decode_below_threshold_is_empty():
    assert decode(_out([0.1, 0.49], [1, 1], [1, 1]), 1.0, 2.0) == []


def test_decode_offset_arithmetic():
    probs = np.zeros(40)
    probs[30] = 0.9
    ds = np.zeros(40)
    de = np.zeros(40)
    ds[30], de[30] = 20.5, 39.5
    (c,) = decode(_out(probs, ds, de), 1.0, 100.0)
    assert (c.start, c.end, c.score, c.source_segment) == (10.0, 70.0, 0.9, 30)


def test_decode_clamps_to_video():
    (c,) = decode(_out([0.8, 0.1], [5.0, 0], [30.0, 0]), 1.0, 2.0)
    assert c.start == 0.0 and c.end == 2.0


def test_decode_drops_zero_length_after_clamp():
    # both offsets zero: [0.5, 0.5] is empty
    assert decode(_out([0.9], [0.0], [0.0]), 1.0, 1.0) == []


def test_decode_of_exact_labels_recovers_clips():
    clips = [Interval(3.0, 11.0), Interval(20.0, 47.0)]
    lab = clips_to_labels(clips, 60.0)
    cands = merge_duplicates(decode(_out(lab.class_label.astype(float), lab.start_offset, lab.end_offset), 1.0, 60.0))
    assert sorted(c.interval for c in cands) == clips


def test_merge_keeps_best_score():
    merged = merge_duplicates([_pred(0, 10, 0.6, 1), _pred(0, 10 + 1e-9, 0.9, 2), _pred(5, 12, 0.7, 3)])
    assert sorted((c.start, c.score) for c in merged) == [(0, 0.9), (5, 0.7)]


# -- soft-NMS --------------------------------------------------------------


def test_soft_nms_disjoint_untouched():
    out = soft_nms([_pred(0, 10, 0.8, 0), _pred(20, 30, 0.9, 1)])
    assert [(c.start, c.score) for c in out] == [(20, 0.9), (0, 0.8)]


def test_soft_nms_single_candidate():
    assert soft_nms([_pred(1, 4, 0.3)]) == [_pred(1, 4, 0.3)]


def test_soft_nms_decay_closed_form():
    # [0, 10] vs [4, 10]: tiou 0.6
    a, b = _pred(0, 10, 0.9, 0), _pred(4, 10, 0.8, 1)
    assert tiou(a.interval, b.interval) == pytest.approx(0.6)
    out = soft_nms([a, b], sigma=0.5)
    assert out[0] == a
    assert out[1].score == pytest.approx(0.8 * math.exp(-0.36 / 0.5), abs=1e-12)
    assert out[1].score == pytest.approx(0.3894018, abs=1e-6)


def test_soft_nms_tie_breaks_by_start_then_source():
    # disjoint, so no decay: order is decided purely by the tie-break
    out = soft_nms([_pred(50, 60, 0.5, 7), _pred(10, 20, 0.5, 9), _pred(30, 40, 0.5, 1)])
    assert [c.source_segment for c in out] == [9, 1, 7]
    out = soft_nms([_pred(10, 20, 0.5, 9), _pred(10, 20, 0.5, 3)], score_floor=0)
    assert out[0].source_segment == 3


def test_soft_nms_floor_drops():
    out = soft_nms([_pred(0, 10, 0.9), _pred(0, 10.01, 0.0015)], score_floor=1e-3)
    assert len(out) == 1


cand_lists = st.lists(
    st.tuples(st.floats(0, 100), st.floats(0.5, 40), st.floats(0.01, 1.0)),
    min_size=1,
    max_size=15,
)


def _mk(raw):
    return [_pred(s, s + w, sc, i) for i, (s, w, sc) in enumerate(raw)]


@settings(max_examples=200, deadline=None)
@given(cand_lists)
def test_soft_nms_never_raises_scores_and_keeps_top1(raw):
    cands = _mk(raw)
    out = soft_nms(cands)
    orig = {c.source_segment: c.score for c in cands}
    assert all(c.score <= orig[c.source_segment] + 1e-15 for c in out)
    top = max(cands, key=lambda c: (c.score, -c.start, -c.source_segment))
    assert out[0].source_segment == top.source_segment and out[0].score == top.score
    assert [c.score for c in out] == sorted((c.score for c in out), reverse=True)


def _hard_nms(cands):
    kept = []
    for c in sorted(cands, key=lambda c: (-c.score, c.start, c.source_segment)):
        if all(tiou(c.interval, k.interval) == 0 for k in kept):
            kept.append(c)
    return kept


@settings(max_examples=200, deadline=None)
@given(cand_lists)
def test_soft_nms_tiny_sigma_is_hard_nms(raw):
    cands = _mk(raw)
    # scores start at 0.01, well above the floor
    out = soft_nms(cands, sigma=1e-6)
    ref = _hard_nms(cands)
    assert [(c.source_segment, c.score) for c in out] == [(c.source_segment, c.score) for c in ref]


# -- top-k -----------------------------------------------------------------


@pytest.mark.parametrize("duration,k", [(600, 3), (1200, 6), (300, 2), (100, 1), (1, 1), (500, 3), (499, 2)])
def test_top_k(duration, k):
    assert top_k_for_duration(duration) == k


def test_postprocess_truncates_to_top_k():
    n = 600
    probs = np.full(n, 0.9)
    out = postprocess(_out(probs, np.full(n, 2.0), np.full(n, 2.0)), 1.0, 600.0)
    assert len(out) == 3


# -- AP --------------------------------------------------------------------


def test_ap_perfect():
    gt = {"a": [Interval(0, 10), Interval(20, 30)], "b": [Interval(5, 9)]}
    preds = {k: [ClipPrediction(iv, 0.9) for iv in v] for k, v in gt.items()}
    for t in (0.5, 0.9, 1.0):
        assert average_precision(preds, gt, t) == 1.0


def test_ap_no_predictions():
    assert average_precision({}, {"a": [Interval(0, 1)]}, 0.5) == 0.0


def test_ap_empty_ground_truth():
    assert average_precision({"a": [_pred(0, 1, 0.5)]}, {"a": []}, 0.5) == 0.0


def test_ap_miss_then_hit():
    gt = {"a": [Interval(0, 10)]}
    miss = _pred(7, 14.333333333333334, 0.9)  # tiou 3/14.33 < 0.5
    hit = _pred(0, 8, 0.8)  # tiou 0.8
    assert tiou(hit.interval, gt["a"][0]) == pytest.approx(0.8)
    assert tiou(miss.interval, gt["a"][0]) < 0.5
    assert average_precision({"a": [miss, hit]}, gt, 0.5) == pytest.approx(0.5)


def test_ap_unknown_video():
    with pytest.raises(VideoIdMismatch):
        average_precision({"zzz": [_pred(0, 1, 0.5)]}, {"a": [Interval(0, 1)]}, 0.5)


def _brute_force_ap(preds, gt, thr):
    """Independent reference: python greedy matching + sweep over every cutoff."""
    vids = list(gt)
    ranked = sorted(((p.score, vids.index(v), p) for v, ps in preds.items() for p in ps),
                    key=lambda r: (-r[0], r[1], r[2].start, r[2].end))
    used = {v: [False] * len(gt[v]) for v in vids}
    hits = []
    for _, vi, p in ranked:
        v = vids[vi]
        best, best_j = -1.0, None
        for j, g in enumerate(gt[v]):
            if not used[v][j]:
                o = tiou(p.interval, g)
                if o > best:
                    best, best_j = o, j
        ok = best_j is not None and best >= thr
        if ok:
            used[v][best_j] = True
        hits.append(ok)
    n_gt = sum(len(g) for g in gt.values())
    if n_gt == 0 or not hits:
        return 0.0
    curve = []
    for cut in range(1, len(hits) + 1):
        tp = sum(hits[:cut])
        curve.append((tp / n_gt, tp / cut))
    ap, prev_r = 0.0, 0.0
    for r in sorted({r for r, _ in curve}):
        if r > prev_r:
            ap += (r - prev_r) * max(p for rr, p in curve if rr >= r)
            prev_r = r
    return ap


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ap_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    gt, preds = {}, {}
    budget = int(rng.integers(0, 21))
    for v in range(int(rng.integers(1, 4))):
        vid = f"v{v}"
        gt[vid] = []
        for _ in range(int(rng.integers(0, 4))):
            s = float(rng.uniform(0, 80))
            gt[vid].append(Interval(s, s + float(rng.uniform(2, 20))))
        preds[vid] = []
    for _ in range(budget):
        vid = f"v{int(rng.integers(len(gt)))}"
        s = float(rng.uniform(0, 80))
        preds[vid].append(_pred(s, s + float(rng.uniform(2, 20)), float(rng.choice([0.3, 0.5, 0.7, rng.uniform()]))))
    for thr in TIOU_THRESHOLDS:
        assert average_precision(preds, gt, thr) == pytest.approx(_brute_force_ap(preds, gt, thr), abs=1e-9)
    assert average_precision(preds, gt, 0.9) <= average_precision(preds, gt, 0.5) + 1e-12


# -- end to end ------------------------------------------------------------


def test_oracle_scores_one(small_corpus):
    report = evaluate("oracle", small_corpus)
    assert all(report.ap_per_threshold[t] == 1.0 for t in TIOU_THRESHOLDS)
    assert report.average == 1.0
    assert oracle_outputs(small_corpus[0]).prob_fused.max() == 1.0


def test_report_json_round_trip(small_corpus):
    report = evaluate("oracle", small_corpus)
    back = EvalReport.from_json(__import__("json").loads(report.dumps()))
    assert back == report
    assert list(report.to_json()["ap_per_threshold"]) == ["0.5", "0.6", "0.7", "0.8", "0.9"]


def test_report_average_is_mean():
    rep = EvalReport.from_ap({0.5: 0.9, 0.6: 0.7, 0.7: 0.31, 0.8: 0.2, 0.9: 0.01})
    assert abs(rep.average - (0.9 + 0.7 + 0.31 + 0.2 + 0.01) / 5) < 1e-12
    assert "Avg." in rep.table()


def test_untrained_model_scores_low(small_corpus):
    from repurpose_loc.model import ModelConfig, build_model

    model = build_model(ModelConfig(d_model=32, n_heads=4, input_dims=(16, 24, 8)), seed=0)
    assert evaluate(model, small_corpus).average < 0.05
