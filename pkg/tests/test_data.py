import json

import numpy as np
import pytest
from scipy import stats

from repurpose_loc.core import Interval, ShapeMismatch, clips_to_labels
from repurpose_loc.data import (
    CaptionSpan,
    CorruptContainer,
    DatasetManifest,
    InvalidConfig,
    ManifestEntry,
    MissingEmbedding,
    SchemaError,
    SyntheticConfig,
    TooFewEntries,
    align_captions,
    generate_synthetic,
    load_video,
    split_manifest,
    write_feature_array,
    write_video,
)


def span(a, b, value, dim=4):
    return CaptionSpan(Interval(a, b), f"s{a}", np.full(dim, value, dtype=np.float32))


# -- align_captions --------------------------------------------------------


def test_align_single_span():
    feats, empty = align_captions([span(3.2, 7.8, 1.0)], 10, 1.0)
    assert feats.shape == (10, 4)
    assert np.flatnonzero(~empty).tolist() == [3, 4, 5, 6, 7]
    assert np.all(feats[3:8] == 1.0)
    assert np.all(feats[[0, 1, 2, 8, 9]] == 0.0)


def test_align_no_spans_uses_empty_token():
    token = np.arange(4, dtype=np.float32)
    feats, empty = align_captions([], 5, 1.0, empty_embedding=token)
    assert empty.all()
    assert np.all(feats == token)


def test_align_largest_overlap_wins():
    feats, _ = align_captions([span(0, 2, 1.0), span(1.5, 4, 2.0)], 5, 1.0)
    assert feats[1, 0] == 1.0  # overlap 1.0 beats 0.5
    assert feats[2, 0] == 2.0


def test_align_ties_go_to_earlier_span():
    # both spans cover 0.5s of segment 1
    feats, _ = align_captions([span(1.5, 3, 2.0), span(0, 1.5, 1.0)], 4, 1.0)
    assert feats[1, 0] == 1.0


def test_align_missing_embedding():
    with pytest.raises(MissingEmbedding):
        align_captions([CaptionSpan(Interval(0, 1), "x")], 3, 1.0)


@pytest.mark.parametrize("spans", [
    [span(0, 50, 1.0)],                         # beyond video end
    [span(0, 3, 1.0), span(1, 2, 2.0)],         # nested
    [span(9.99, 10.5, 1.0), span(2, 2.01, 3.0)],
])
def test_align_always_returns_t_rows(spans):
    feats, empty = align_captions(spans, 10, 1.0)
    assert feats.shape == (10, 4) and empty.shape == (10,)


# -- split_manifest --------------------------------------------------------


def _entries(n):
    return [ManifestEntry(f"v{i}", 10.0, f"f/{i}", f"a/{i}.json") for i in range(n)]


@pytest.mark.parametrize("n, sizes", [(10, (8, 1, 1)), (12, (10, 1, 1)), (3, (1, 1, 1)), (100, (80, 10, 10))])
def test_split_sizes(n, sizes):
    parts = split_manifest(_entries(n), seed=0)
    assert tuple(len(p) for p in parts) == sizes
    ids = [e.video_id for p in parts for e in p.entries]
    assert sorted(ids) == sorted(e.video_id for e in _entries(n))
    assert [p.split for p in parts] == ["train", "val", "test"]


def test_split_deterministic():
    a = split_manifest(_entries(20), seed=5)
    b = split_manifest(_entries(20), seed=5)
    assert [p.entries for p in a] == [p.entries for p in b]


def test_split_too_few():
    with pytest.raises(TooFewEntries):
        split_manifest(_entries(2))


def test_manifest_rejects_duplicates():
    with pytest.raises(SchemaError):
        DatasetManifest(_entries(2) + _entries(1), "train")


# -- synthetic generator ---------------------------------------------------


def _tiny(**kw):
    base = dict(num_videos=5, duration_range=(120, 300), feature_dims=(8, 8, 8), seed=11)
    base.update(kw)
    return SyntheticConfig(**base)


def test_generator_deterministic():
    a = generate_synthetic(_tiny())
    b = generate_synthetic(_tiny())
    for x, y in zip(a, b):
        assert x.video_id == y.video_id and x.duration == y.duration
        assert x.clips == y.clips
        for name in ("visual_features", "audio_features", "caption_features"):
            assert np.array_equal(getattr(x, name), getattr(y, name))
        assert np.array_equal(x.caption_empty, y.caption_empty)


def test_generator_seed_changes_output():
    a = generate_synthetic(_tiny(seed=1))[0]
    b = generate_synthetic(_tiny(seed=2))[0]
    assert not np.array_equal(a.visual_features, b.visual_features)


def test_generator_invariants():
    for v in generate_synthetic(_tiny(num_videos=20)):
        assert v.num_segments == int(v.duration)
        assert v.visual_features.shape == (v.num_segments, 8)
        assert 1 <= len(v.clips)
        for c in v.clips:
            assert 0 <= c.start < c.end <= v.duration
            assert 20 - 1e-9 <= c.length <= 150 + 1e-9
        ordered = sorted(v.clips)
        assert all(a.end <= b.start for a, b in zip(ordered, ordered[1:]))


def test_generator_clip_density_monte_carlo():
    cfg = _tiny(num_videos=1000, duration_range=(600, 600), feature_dims=(1, 1, 1), seed=0)
    counts = [len(v.clips) for v in generate_synthetic(cfg)]
    # Poisson(3) clamped at >= 1 has mean 3 + P(N=0) = 3.0498
    assert np.mean(counts) == pytest.approx(3.0, rel=0.05)


def test_generator_positive_rate_matches_clip_time():
    for v in generate_synthetic(_tiny(num_videos=10)):
        labels = clips_to_labels(v.clips, v.duration)
        clip_time = sum(c.length for c in v.clips)
        assert abs(labels.class_label.sum() - clip_time) <= 2 * len(v.clips)


def test_generator_cap_to_topk():
    from repurpose_loc.evaluation import top_k_for_duration

    for v in generate_synthetic(_tiny(num_videos=30, cap_clips_to_topk=True)):
        assert len(v.clips) <= top_k_for_duration(v.duration)


def test_zero_signal_is_indistinguishable():
    vids = generate_synthetic(_tiny(num_videos=10, signal_strength=0.0, feature_dims=(32, 8, 8)))
    pos, neg = [], []
    for v in vids:
        c = clips_to_labels(v.clips, v.duration).class_label.astype(bool)
        pos.append(v.visual_features[c])
        neg.append(v.visual_features[~c])
    pos, neg = np.concatenate(pos), np.concatenate(neg)
    for k in range(4):
        p = stats.ttest_ind(pos[:, k], neg[:, k]).pvalue
        assert p > 0.01


def test_planted_signal_linearly_separable():
    cfg = SyntheticConfig(num_videos=20, duration_range=(150, 330), feature_dims=(512, 8, 8), seed=5,
                          signal_strength=2.0)
    vids = generate_synthetic(cfg)
    x = np.concatenate([v.visual_features for v in vids]).astype(np.float64)
    y = np.concatenate([clips_to_labels(v.clips, v.duration).class_label for v in vids]).astype(np.float64)
    design = np.hstack([x, np.ones((len(x), 1))])
    w, *_ = np.linalg.lstsq(design, y, rcond=None)
    acc = np.mean((design @ w > 0.5) == (y > 0.5))
    assert acc >= 0.90


def test_config_validation():
    with pytest.raises(InvalidConfig):
        SyntheticConfig(num_videos=0)
    with pytest.raises(InvalidConfig):
        SyntheticConfig(duration_range=(300, 100))
    with pytest.raises(InvalidConfig):
        SyntheticConfig(clip_density=0)
    with pytest.raises(InvalidConfig):
        SyntheticConfig.from_dict({"bogus": 1})


# -- containers ------------------------------------------------------------


@pytest.fixture
def written(tmp_path):
    v = generate_synthetic(_tiny(num_videos=1))[0]
    entry = write_video(v, tmp_path)
    return v, entry, tmp_path


def test_load_round_trip(written):
    v, entry, root = written
    back = load_video(entry, base_dir=root)
    assert back.num_segments == int(v.duration)
    assert np.array_equal(back.visual_features, v.visual_features)
    assert np.array_equal(back.caption_features, v.caption_features)
    assert np.array_equal(back.caption_empty, v.caption_empty)
    assert back.clips == v.clips


def test_sidecar_format(written):
    v, entry, root = written
    meta = json.loads((root / entry.feature_path / "audio.json").read_text())
    assert meta == {"rows": v.num_segments, "cols": 8, "dtype": "float32", "modality": "audio", "byte_order": "little"}
    raw = (root / entry.feature_path / "audio.f32").read_bytes()
    assert np.array_equal(np.frombuffer(raw, "<f4").reshape(v.num_segments, 8), v.audio_features)


def test_load_short_rows_strict(written):
    v, entry, root = written
    write_feature_array(root / entry.feature_path, "visual", v.visual_features[:-1])
    with pytest.raises(ShapeMismatch):
        load_video(entry, base_dir=root)


def test_load_extra_rows_lenient(written):
    v, entry, root = written
    extra = np.vstack([v.visual_features, np.zeros((2, 8), np.float32)])
    write_feature_array(root / entry.feature_path, "visual", extra)
    with pytest.raises(ShapeMismatch):
        load_video(entry, base_dir=root, strict=True)
    back = load_video(entry, base_dir=root, strict=False)
    assert back.visual_features.shape[0] == v.num_segments
    assert any("truncated" in w for w in back.warnings)


def test_load_corrupt_container(written):
    v, entry, root = written
    (root / entry.feature_path / "caption.f32").write_bytes(b"\x00" * 7)
    with pytest.raises(CorruptContainer):
        load_video(entry, base_dir=root)


def test_load_bad_annotation(written):
    v, entry, root = written
    (root / entry.annotation_path).write_text(json.dumps({"video_id": v.video_id, "clips": []}))
    with pytest.raises(SchemaError):
        load_video(entry, base_dir=root)


def test_manifest_json_round_trip(tmp_path):
    m = DatasetManifest(_entries(3), "val")
    m.save(tmp_path / "m.json")
    raw = json.loads((tmp_path / "m.json").read_text())
    assert set(raw) == {"split", "entries"}
    assert set(raw["entries"][0]) == {"video_id", "duration", "feature_path", "annotation_path"}
    back = DatasetManifest.load(tmp_path / "m.json")
    assert back.entries == m.entries and back.split == "val"
