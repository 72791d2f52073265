"""Feature containers, annotations, caption alignment and synthetic corpora.

On-disk layout for one video::

    <video_dir>/visual.f32    little-endian float32, row-major [T x D_v]
    <video_dir>/visual.json   {"rows", "cols", "dtype", "modality", "byte_order"}
    <video_dir>/audio.f32 / audio.json
    <video_dir>/caption.f32 / caption.json
    <annotation>.json         {"video_id", "duration", "clips", "captions"}
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import (
    Interval,
    ReproError,
    ShapeMismatch,
    VideoSample,
    clips_to_labels,
    num_segments_for,
)

logger = logging.getLogger(__name__)

MODALITIES = ("visual", "audio", "caption")
SPLITS = ("train", "val", "test")


class MissingEmbedding(ReproError, ValueError):
    pass


class CorruptContainer(ReproError, ValueError):
    pass


class SchemaError(ReproError, ValueError):
    pass


class TooFewEntries(ReproError, ValueError):
    pass


class InfeasiblePacking(ReproError, ValueError):
    pass


class InvalidConfig(ReproError, ValueError):
    pass


@dataclass
class CaptionSpan:
    interval: Interval
    text: str
    embedding: np.ndarray | None = None


@dataclass(frozen=True)
class ManifestEntry:
    video_id: str
    duration: float
    feature_path: str
    annotation_path: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    split: str = "train"
    base_dir: Path | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise SchemaError(f"unknown split {self.split!r}")
        seen = set()
        for e in self.entries:
            if e.video_id in seen:
                raise SchemaError(f"duplicate video_id {e.video_id!r} in {self.split} manifest")
            seen.add(e.video_id)

    def __len__(self):
        return len(self.entries)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        if not p.is_absolute() and self.base_dir is not None:
            p = self.base_dir / p
        return p

    def to_json(self) -> dict:
        return {"split": self.split, "entries": [asdict(e) for e in self.entries]}

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"manifest not found: {path}")
        try:
            raw = json.loads(path.read_text())
            entries = [
                ManifestEntry(
                    video_id=str(e["video_id"]),
                    duration=float(e["duration"]),
                    feature_path=str(e["feature_path"]),
                    annotation_path=str(e["annotation_path"]),
                )
                for e in raw["entries"]
            ]
            split = raw["split"]
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"{path}: malformed manifest ({exc})") from exc
        return cls(entries=entries, split=split, base_dir=path.parent)


# ---------------------------------------------------------------------------
# caption alignment
# ---------------------------------------------------------------------------


def align_captions(
    spans: Sequence[CaptionSpan],
    num_segments: int,
    segment_length: float = 1.0,
    *,
    dim: int | None = None,
    empty_embedding: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Give every segment the embedding of its best-overlapping caption.

    A sentence spanning several segments is repeated in each of them. When
    several sentences hit one segment the largest overlap wins, ties going to
    the earlier sentence. Segments without speech get ``empty_embedding``
    (zeros by default) and a ``True`` flag.
    """
    for span in spans:
        if span.embedding is None:
            raise MissingEmbedding(f"caption {span.text!r} at {span.interval.as_tuple()} has no embedding")
    if dim is None:
        if spans:
            dim = len(spans[0].embedding)
        elif empty_embedding is not None:
            dim = len(empty_embedding)
        else:
            raise ValueError("dim is required when there are no caption spans")
    fill = np.zeros(dim, dtype=np.float32) if empty_embedding is None else np.asarray(empty_embedding, np.float32)

    out = np.tile(fill, (num_segments, 1))
    empty = np.ones(num_segments, dtype=bool)
    best = np.zeros(num_segments, dtype=np.float64)
    horizon = num_segments * segment_length
    ordered = sorted(range(len(spans)), key=lambda i: spans[i].interval.start)
    for i in ordered:
        span = spans[i]
        s = max(0.0, span.interval.start)
        e = min(horizon, span.interval.end)
        if e <= s:
            continue
        first = int(math.floor(s / segment_length))
        last = min(num_segments - 1, int(math.ceil(e / segment_length)) - 1)
        for t in range(first, last + 1):
            ov = min(e, (t + 1) * segment_length) - max(s, t * segment_length)
            if ov > best[t]:
                best[t] = ov
                out[t] = span.embedding
                empty[t] = False
    return out, empty


# ---------------------------------------------------------------------------
# containers and annotations
# ---------------------------------------------------------------------------


def write_feature_array(video_dir: Path, modality: str, array: np.ndarray) -> None:
    video_dir.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(array, dtype="<f4")
    (video_dir / f"{modality}.f32").write_bytes(arr.tobytes(order="C"))
    sidecar = {
        "rows": int(arr.shape[0]),
        "cols": int(arr.shape[1]),
        "dtype": "float32",
        "modality": modality,
        "byte_order": "little",
    }
    (video_dir / f"{modality}.json").write_text(json.dumps(sidecar, sort_keys=True) + "\n")


def read_feature_array(video_dir: Path, modality: str) -> np.ndarray:
    meta_path = video_dir / f"{modality}.json"
    data_path = video_dir / f"{modality}.f32"
    if not meta_path.exists() or not data_path.exists():
        raise FileNotFoundError(f"missing {modality} features under {video_dir}")
    try:
        meta = json.loads(meta_path.read_text())
        rows, cols = int(meta["rows"]), int(meta["cols"])
    except (KeyError, ValueError, TypeError) as exc:
        raise CorruptContainer(f"{meta_path}: bad sidecar ({exc})") from exc
    if meta.get("dtype", "float32") != "float32" or meta.get("byte_order", "little") != "little":
        raise CorruptContainer(f"{meta_path}: unsupported dtype/byte order")
    raw = data_path.read_bytes()
    if len(raw) != rows * cols * 4:
        raise CorruptContainer(f"{data_path}: {len(raw)} bytes, sidecar promises {rows}x{cols} float32")
    return np.frombuffer(raw, dtype="<f4").reshape(rows, cols).astype(np.float32)


def annotation_to_json(sample: VideoSample) -> dict:
    return {
        "video_id": sample.video_id,
        "duration": sample.duration,
        "clips": [{"start": c.start, "end": c.end} for c in sample.clips],
        "captions": [{"start": iv.start, "end": iv.end, "text": text} for iv, text in sample.caption_spans],
    }


def parse_annotation(raw: dict, source: str = "<annotation>") -> tuple[str, float, list[Interval], list[tuple[Interval, str]]]:
    try:
        video_id = raw["video_id"]
        duration = float(raw["duration"])
        clips = [Interval(float(c["start"]), float(c["end"])) for c in raw["clips"]]
        captions = [(Interval(float(c["start"]), float(c["end"])), str(c["text"])) for c in raw.get("captions", [])]
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{source}: {exc}") from exc
    if not isinstance(video_id, str):
        raise SchemaError(f"{source}: video_id must be a string")
    return video_id, duration, clips, captions


def write_video(sample: VideoSample, root: Path) -> ManifestEntry:
    """Write features and annotation for one video under ``root``."""
    root = Path(root)
    feat_dir = root / "features" / sample.video_id
    write_feature_array(feat_dir, "visual", sample.visual_features)
    write_feature_array(feat_dir, "audio", sample.audio_features)
    write_feature_array(feat_dir, "caption", sample.caption_features)
    ann_path = root / "annotations" / f"{sample.video_id}.json"
    ann_path.parent.mkdir(parents=True, exist_ok=True)
    ann_path.write_text(json.dumps(annotation_to_json(sample), indent=1) + "\n")
    return ManifestEntry(
        video_id=sample.video_id,
        duration=sample.duration,
        feature_path=str(feat_dir.relative_to(root)),
        annotation_path=str(ann_path.relative_to(root)),
    )


def load_video(
    entry: ManifestEntry,
    *,
    base_dir: Path | None = None,
    strict: bool = True,
    segment_length: float = 1.0,
) -> VideoSample:
    """Load one manifest entry.

    Feature rows must equal ``floor(duration / segment_length)``. Extra rows
    are an error in strict mode and are truncated otherwise; missing rows are
    always an error. Caption-empty flags come from the annotation's caption
    spans.
    """
    base = Path(base_dir) if base_dir is not None else Path(".")
    feat_dir = Path(entry.feature_path)
    ann_path = Path(entry.annotation_path)
    if not feat_dir.is_absolute():
        feat_dir = base / feat_dir
    if not ann_path.is_absolute():
        ann_path = base / ann_path
    if not ann_path.exists():
        raise FileNotFoundError(f"annotation not found: {ann_path}")
    try:
        raw = json.loads(ann_path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{ann_path}: invalid JSON ({exc})") from exc
    video_id, duration, clips, captions = parse_annotation(raw, str(ann_path))
    if video_id != entry.video_id:
        raise SchemaError(f"{ann_path}: video_id {video_id!r} does not match manifest {entry.video_id!r}")

    t = num_segments_for(duration, segment_length)
    notes = []
    feats = {}
    for modality in MODALITIES:
        arr = read_feature_array(feat_dir, modality)
        rows = arr.shape[0]
        if rows != t:
            if strict or rows < t:
                raise ShapeMismatch(f"{video_id}: {modality} has {rows} rows, expected {t}")
            notes.append(f"{modality}: truncated {rows} rows to {t}")
            logger.warning("%s: truncated %s features from %d to %d rows", video_id, modality, rows, t)
            arr = arr[:t]
        feats[modality] = arr

    spans = [CaptionSpan(iv, text, embedding=np.zeros(1, np.float32)) for iv, text in captions]
    _, empty = align_captions(spans, t, segment_length, dim=1)
    return VideoSample(
        video_id=video_id,
        duration=duration,
        visual_features=feats["visual"],
        audio_features=feats["audio"],
        caption_features=feats["caption"],
        clips=clips,
        caption_spans=captions,
        caption_empty=empty,
        segment_length=segment_length,
        warnings=notes,
    )


def load_manifest_videos(manifest: DatasetManifest, *, strict: bool = True, segment_length: float = 1.0) -> list[VideoSample]:
    return [load_video(e, base_dir=manifest.base_dir, strict=strict, segment_length=segment_length) for e in manifest.entries]


def split_manifest(
    entries: Sequence[ManifestEntry],
    ratios: tuple[float, float, float] = (8, 1, 1),
    seed: int = 0,
) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Shuffle and split into train/val/test.

    Val and test get ``floor(n * ratio / total)`` entries (at least one each);
    the remainder goes to train.
    """
    n = len(entries)
    if n < 3:
        raise TooFewEntries(f"need at least 3 entries to split, got {n}")
    total = float(sum(ratios))
    n_val = max(1, int(math.floor(n * ratios[1] / total)))
    n_test = max(1, int(math.floor(n * ratios[2] / total)))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise TooFewEntries(f"{n} entries leave no training data at ratios {ratios}")
    perm = np.random.default_rng(seed).permutation(n)
    picked = [entries[i] for i in perm]
    return (
        DatasetManifest(picked[:n_train], "train"),
        DatasetManifest(picked[n_train : n_train + n_val], "val"),
        DatasetManifest(picked[n_train + n_val :], "test"),
    )


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------

CLIP_MIN_S = 20.0
CLIP_MAX_S = 150.0
PACKING_ATTEMPTS = 100


@dataclass
class SyntheticConfig:
    num_videos: int = 100
    duration_range: tuple[float, float] = (600.0, 2400.0)
    clip_density: float = 3.0
    clip_duration_mean: float = 60.0
    clip_duration_std: float = 15.0
    signal_strength: float = 2.0
    feature_dims: tuple[int, int, int] = (512, 2048, 384)
    seed: int = 0
    segment_length: float = 1.0
    ramp_width: int = 3
    caption_length_range: tuple[float, float] = (2.0, 8.0)
    caption_gap_mean: float = 1.5
    cap_clips_to_topk: bool = False
    id_prefix: str = "syn"

    def __post_init__(self):
        self.duration_range = tuple(float(x) for x in self.duration_range)
        self.feature_dims = tuple(int(x) for x in self.feature_dims)
        self.caption_length_range = tuple(float(x) for x in self.caption_length_range)
        self.validate()

    def validate(self) -> None:
        lo, hi = self.duration_range
        problems = []
        if self.num_videos < 1:
            problems.append(f"num_videos must be >= 1 (got {self.num_videos})")
        if not (0 < lo <= hi):
            problems.append(f"duration_range must be positive and ordered (got {self.duration_range})")
        if self.clip_density <= 0:
            problems.append("clip_density must be > 0")
        if self.signal_strength < 0:
            problems.append("signal_strength must be >= 0")
        if len(self.feature_dims) != 3 or min(self.feature_dims) < 1:
            problems.append(f"feature_dims must be three positive ints (got {self.feature_dims})")
        if self.segment_length <= 0:
            problems.append("segment_length must be > 0")
        if self.ramp_width < 0:
            problems.append("ramp_width must be >= 0")
        if problems:
            raise InvalidConfig("; ".join(problems))

    @classmethod
    def from_dict(cls, raw: dict) -> "SyntheticConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise InvalidConfig(f"unknown synthetic config keys: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("duration_range", "feature_dims", "caption_length_range"):
            d[k] = list(d[k])
        return d


def planted_amplitude(signal_strength: float) -> float:
    """Shift along the planted direction for a given ``signal_strength``.

    Strength counts standard deviations of the difference between two
    independent noise draws, so the per-segment shift is ``sqrt(2) * s``.
    """
    return float(signal_strength) * math.sqrt(2.0)


def _layout_clips(rng: np.random.Generator, duration: float, config: SyntheticConfig) -> tuple[list[Interval], list[str]]:
    from .evaluation import top_k_for_duration

    notes = []
    count = max(1, int(rng.poisson(config.clip_density * duration / 600.0)))
    if config.cap_clips_to_topk:
        count = min(count, top_k_for_duration(duration))
    while count >= 1:
        for _ in range(PACKING_ATTEMPTS):
            lengths = np.clip(rng.normal(config.clip_duration_mean, config.clip_duration_std, size=count), CLIP_MIN_S, CLIP_MAX_S)
            free = duration - lengths.sum()
            if free >= 0:
                gaps = free * rng.dirichlet(np.ones(count + 1))
                clips = []
                cursor = 0.0
                for gap, length in zip(gaps[:-1], lengths):
                    start = cursor + gap
                    clips.append(Interval(float(start), float(min(start + length, duration))))
                    cursor = start + length
                return clips, notes
        notes.append(f"could not pack {count} clips into {duration:.1f}s after {PACKING_ATTEMPTS} attempts; retrying with {count - 1}")
        count -= 1
    raise InfeasiblePacking(f"no clip of at least {CLIP_MIN_S}s fits in a {duration:.1f}s video")


def _signal_profile(num_segments: int, positive: np.ndarray, ramp_width: int) -> np.ndarray:
    """1.0 on positive segments, decaying linearly from 0.5 over ``ramp_width`` neighbours outside."""
    profile = positive.astype(np.float64)
    if ramp_width == 0:
        return profile
    edges = np.flatnonzero(np.diff(np.concatenate([[0], positive.astype(np.int8), [0]])))
    for run_start, run_end in zip(edges[::2], edges[1::2]):
        for j in range(1, ramp_width + 1):
            w = 0.5 * (ramp_width - j + 1) / ramp_width
            for t in (run_start - j, run_end - 1 + j):
                if 0 <= t < num_segments and not positive[t]:
                    profile[t] = max(profile[t], w)
    return profile


def _caption_spans(rng: np.random.Generator, duration: float, config: SyntheticConfig) -> list[Interval]:
    lo, hi = config.caption_length_range
    spans = []
    cursor = float(rng.exponential(config.caption_gap_mean))
    while cursor < duration:
        end = min(duration, cursor + float(rng.uniform(lo, hi)))
        if end > cursor:
            spans.append(Interval(cursor, end))
        cursor = end + float(rng.exponential(config.caption_gap_mean))
    return spans


def generate_synthetic(config: SyntheticConfig) -> list[VideoSample]:
    """Random corpus with clips planted consistently in all three modalities.

    Background features are standard normal. Inside each clip every modality
    is shifted along its own fixed random unit direction (one per modality for
    the whole corpus), with a half-strength linear ramp just outside each clip
    edge. Captions are random sentence spans whose embeddings carry the mean
    shift of the segments they cover. Deterministic in ``config.seed``.
    """
    config.validate()
    root = np.random.SeedSequence(config.seed)
    dir_seq, *video_seqs = root.spawn(config.num_videos + 1)
    dir_rng = np.random.default_rng(dir_seq)
    directions = []
    for dim in config.feature_dims:
        u = dir_rng.standard_normal(dim)
        directions.append(u / np.linalg.norm(u))
    amp = planted_amplitude(config.signal_strength)
    lo, hi = config.duration_range
    seg = config.segment_length
    width = len(str(config.num_videos - 1))

    samples = []
    for i, seq in enumerate(video_seqs):
        layout_seq, feat_seq = seq.spawn(2)
        layout_rng = np.random.default_rng(layout_seq)
        feat_rng = np.random.default_rng(feat_seq)
        duration = round(float(layout_rng.uniform(lo, hi)), 1)
        clips, notes = _layout_clips(layout_rng, duration, config)
        caption_ivs = _caption_spans(layout_rng, duration, config)

        t = num_segments_for(duration, seg)
        positive = clips_to_labels(clips, duration, seg).class_label.astype(bool)
        profile = _signal_profile(t, positive, config.ramp_width)
        dv, da, dc = config.feature_dims
        visual = feat_rng.standard_normal((t, dv)) + amp * profile[:, None] * directions[0]
        audio = feat_rng.standard_normal((t, da)) + amp * profile[:, None] * directions[1]

        spans = []
        for k, iv in enumerate(caption_ivs):
            first = int(math.floor(iv.start / seg))
            last = min(t, int(math.ceil(iv.end / seg)))
            level = profile[first:last].mean() if last > first else 0.0
            emb = feat_rng.standard_normal(dc) + amp * level * directions[2]
            spans.append(CaptionSpan(iv, f"sentence {k}", emb.astype(np.float32)))
        caption, empty = align_captions(spans, t, seg, dim=dc)

        samples.append(
            VideoSample(
                video_id=f"{config.id_prefix}{i:0{width}d}",
                duration=duration,
                visual_features=visual.astype(np.float32),
                audio_features=audio.astype(np.float32),
                caption_features=caption.astype(np.float32),
                clips=clips,
                caption_spans=[(s.interval, s.text) for s in spans],
                caption_empty=empty,
                segment_length=seg,
                warnings=notes,
            )
        )
    return samples


def write_corpus(samples: Iterable[VideoSample], root: Path) -> list[ManifestEntry]:
    return [write_video(s, Path(root)) for s in samples]


__all__ = [
    "CaptionSpan",
    "CorruptContainer",
    "DatasetManifest",
    "InfeasiblePacking",
    "InvalidConfig",
    "ManifestEntry",
    "MissingEmbedding",
    "SchemaError",
    "SyntheticConfig",
    "TooFewEntries",
    "align_captions",
    "generate_synthetic",
    "load_manifest_videos",
    "load_video",
    "planted_amplitude",
    "read_feature_array",
    "split_manifest",
    "write_corpus",
    "write_feature_array",
    "write_video",
]
