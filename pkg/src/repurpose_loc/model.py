"""Caption-enhanced audio-visual localizer.

Per-modality MLP projections feed a four-stage encoder:

1. ``n_self_layers`` self-attention blocks per modality;
2. ``n_caption_layers`` cross-attention blocks where the visual and audio
   streams query the caption stream;
3. ``n_fusion_layers`` layers of paired cross-attention (visual <- audio and
   audio <- visual, updated simultaneously);
4. concatenation of the streams and a linear map back to ``d_model``.

Dense heads then predict, for every segment, visual/audio/fused
probabilities and two non-negative offsets (seconds) to the clip edges.
Dropping modalities from ``ModelConfig.modalities`` removes the matching
streams and stages.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import ReproError, ShapeMismatch, VideoSample

CHECKPOINT_FORMAT = "repurpose-loc/ckpt-v1"
ALL_MODALITIES = ("A", "V", "C")


class ConfigMismatch(ReproError, ValueError):
    pass


class MaskMismatch(ReproError, ValueError):
    pass


class UnknownBranch(ReproError, KeyError):
    pass


def normalize_modalities(mods) -> tuple[str, ...]:
    if isinstance(mods, str):
        mods = re.split(r"[&,+\s]+", mods) if re.search(r"[&,+\s]", mods) else list(mods)
    out = []
    for m in mods:
        m = m.strip().upper()
        if not m:
            continue
        if m not in ALL_MODALITIES:
            raise ValueError(f"unknown modality {m!r}; expected a subset of A, V, C")
        if m not in out:
            out.append(m)
    if not out:
        raise ValueError("at least one modality is required")
    return tuple(m for m in ALL_MODALITIES if m in out)


@dataclass
class ModelConfig:
    d_model: int = 512
    n_self_layers: int = 3
    n_caption_layers: int = 3
    n_fusion_layers: int = 3
    n_heads: int = 8
    dropout: float = 0.1
    input_dims: tuple[int, int, int] = (512, 2048, 384)
    head_hidden: int | None = None
    modalities: tuple[str, ...] = ALL_MODALITIES
    positional_encoding: bool = True
    # offsets leave the rectifier in units of this many seconds
    offset_scale: float = 30.0

    def __post_init__(self):
        self.input_dims = tuple(int(x) for x in self.input_dims)
        self.modalities = normalize_modalities(self.modalities)
        if self.head_hidden is None:
            self.head_hidden = self.d_model
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if min(self.n_self_layers, self.n_caption_layers, self.n_fusion_layers) < 1:
            raise ValueError("all layer counts must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_dims"] = list(self.input_dims)
        d["modalities"] = list(self.modalities)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        return cls(**raw)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    visual: torch.Tensor  # [B, T, D_v]
    audio: torch.Tensor
    caption: torch.Tensor
    caption_empty: torch.Tensor  # [B, T] bool
    mask: torch.Tensor  # [B, T] bool, True on real segments
    lengths: list[int]
    video_ids: list[str] = field(default_factory=list)
    class_label: torch.Tensor | None = None
    start_offset: torch.Tensor | None = None
    end_offset: torch.Tensor | None = None
    valid_regression: torch.Tensor | None = None


def collate(videos: Sequence[VideoSample], with_labels: bool = True) -> Batch:
    lengths = [v.num_segments for v in videos]
    t_max = max(lengths) if lengths else 0
    mask = torch.zeros(len(videos), t_max, dtype=torch.bool)
    for i, n in enumerate(lengths):
        mask[i, :n] = True

    def pad_feat(name):
        arrs = [getattr(v, name) for v in videos]
        out = torch.zeros(len(videos), t_max, arrs[0].shape[1])
        for i, a in enumerate(arrs):
            out[i, : a.shape[0]] = torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))
        return out

    empty = torch.zeros(len(videos), t_max, dtype=torch.bool)
    for i, v in enumerate(videos):
        empty[i, : lengths[i]] = torch.from_numpy(np.asarray(v.caption_empty, dtype=bool))
    batch = Batch(
        visual=pad_feat("visual_features"),
        audio=pad_feat("audio_features"),
        caption=pad_feat("caption_features"),
        caption_empty=empty,
        mask=mask,
        lengths=lengths,
        video_ids=[v.video_id for v in videos],
    )
    if with_labels:
        labels = [v.labels() for v in videos]
        batch.class_label = torch.zeros(len(videos), t_max)
        batch.start_offset = torch.zeros(len(videos), t_max)
        batch.end_offset = torch.zeros(len(videos), t_max)
        batch.valid_regression = torch.zeros(len(videos), t_max, dtype=torch.bool)
        for i, lab in enumerate(labels):
            n = lengths[i]
            batch.class_label[i, :n] = torch.from_numpy(lab.class_label.astype(np.float32))
            batch.start_offset[i, :n] = torch.from_numpy(lab.start_offset.astype(np.float32))
            batch.end_offset[i, :n] = torch.from_numpy(lab.end_offset.astype(np.float32))
            batch.valid_regression[i, :n] = torch.from_numpy(lab.valid_regression)
    return batch


@dataclass
class ModelOutput:
    prob_visual: torch.Tensor | None
    prob_audio: torch.Tensor | None
    prob_fused: torch.Tensor
    start_offset: torch.Tensor
    end_offset: torch.Tensor
    mask: torch.Tensor | None = None

    def unbatch(self) -> list["ModelOutput"]:
        """Split a batched output into per-video outputs with padding removed."""
        if self.prob_fused.dim() == 1:
            return [self]
        out = []
        for i in range(self.prob_fused.shape[0]):
            n = int(self.mask[i].sum()) if self.mask is not None else self.prob_fused.shape[1]

            def cut(x):
                return None if x is None else x[i, :n]

            out.append(ModelOutput(cut(self.prob_visual), cut(self.prob_audio), cut(self.prob_fused),
                                   cut(self.start_offset), cut(self.end_offset)))
        return out


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def sinusoidal_encoding(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float32)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float32) * (-math.log(10000.0) / dim))
    pe = torch.zeros(length, dim)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div[: dim // 2])
    return pe


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)
        self.dropout = dropout

    def _split(self, x):
        b, t, d = x.shape
        return x.view(b, t, self.n_heads, d // self.n_heads).transpose(1, 2)

    def forward(self, query, context, key_mask):
        b, t, d = query.shape
        q, k, v = self._split(self.q(query)), self._split(self.k(context)), self._split(self.v(context))
        attn_mask = key_mask[:, None, None, :]
        y = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask, dropout_p=self.dropout if self.training else 0.0)
        return self.out(y.transpose(1, 2).reshape(b, t, d))


class AttentionBlock(nn.Module):
    """Pre-norm residual attention + feed-forward (width 4d)."""

    def __init__(self, d_model: int, n_heads: int, dropout: float, cross: bool = False):
        super().__init__()
        self.cross = cross
        self.norm_q = nn.LayerNorm(d_model)
        self.norm_kv = nn.LayerNorm(d_model) if cross else None
        self.attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.norm_ff = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(
            nn.Linear(d_model, 4 * d_model),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(4 * d_model, d_model),
        )
        self.drop = nn.Dropout(dropout)

    def forward(self, x, key_mask, context=None):
        q = self.norm_q(x)
        kv = self.norm_kv(context) if self.cross else q
        x = x + self.drop(self.attn(q, kv, key_mask))
        return x + self.drop(self.ff(self.norm_ff(x)))


class FusionLayer(nn.Module):
    """Visual and audio streams attend to each other; both update from the same inputs."""

    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.visual_from_audio = AttentionBlock(d_model, n_heads, dropout, cross=True)
        self.audio_from_visual = AttentionBlock(d_model, n_heads, dropout, cross=True)

    def forward(self, visual, audio, key_mask):
        return (
            self.visual_from_audio(visual, key_mask, context=audio),
            self.audio_from_visual(audio, key_mask, context=visual),
        )


def mlp(in_dim: int, hidden: int, out_dim: int, layers: int = 3) -> nn.Sequential:
    mods = []
    dim = in_dim
    for _ in range(layers - 1):
        mods += [nn.Linear(dim, hidden), nn.ReLU()]
        dim = hidden
    mods.append(nn.Linear(dim, out_dim))
    return nn.Sequential(*mods)


_STREAM = {"V": "visual", "A": "audio", "C": "caption"}


class RepurposeModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        d = c.d_model
        dims = dict(zip(("V", "A", "C"), c.input_dims))
        mods = c.modalities

        # LayerNorm keeps projected features on the same scale as the positional encoding
        self.project = nn.ModuleDict({
            _STREAM[m]: nn.Sequential(*mlp(dims[m], d, d, layers=2), nn.LayerNorm(d)) for m in mods
        })
        if "C" in mods:
            self.empty_caption = nn.Embedding(1, dims["C"])
        self.self_attn = nn.ModuleDict({
            _STREAM[m]: nn.ModuleList(AttentionBlock(d, c.n_heads, c.dropout) for _ in range(c.n_self_layers))
            for m in mods
        })
        # main streams are visual/audio; caption only feeds them unless it is alone
        self.streams = [_STREAM[m] for m in ("V", "A") if m in mods] or ["caption"]
        self.use_caption_enhancement = "C" in mods and self.streams != ["caption"]
        if self.use_caption_enhancement:
            self.caption_cross = nn.ModuleDict({
                s: nn.ModuleList(AttentionBlock(d, c.n_heads, c.dropout, cross=True) for _ in range(c.n_caption_layers))
                for s in self.streams
            })
        self.use_fusion = self.streams == ["visual", "audio"]
        if self.use_fusion:
            self.fusion = nn.ModuleList(FusionLayer(d, c.n_heads, c.dropout) for _ in range(c.n_fusion_layers))
        self.fuse_norm = nn.LayerNorm(len(self.streams) * d)
        self.fuse = nn.Linear(len(self.streams) * d, d)

        h = c.head_hidden
        self.branches = [b for b in ("visual", "audio") if b in self.streams] + ["fused"]
        self.cls_heads = nn.ModuleDict({b: mlp(d, h, 1) for b in self.branches})
        self.reg_head = mlp(d, h, 2)
        nn.init.constant_(self.reg_head[-1].bias, 1.0)

    # -- stages -----------------------------------------------------------

    def project_inputs(self, visual, audio, caption, caption_empty=None) -> dict[str, torch.Tensor]:
        """Map each modality to ``d_model`` row by row."""
        rows = {visual.shape[-2], audio.shape[-2], caption.shape[-2]}
        if len(rows) != 1:
            raise ShapeMismatch(f"modalities disagree on segment count: {sorted(rows)}")
        raw = {"visual": visual, "audio": audio, "caption": caption}
        for name, x in raw.items():
            want = self.config.input_dims[("visual", "audio", "caption").index(name)]
            if name in self.project and x.shape[-1] != want:
                raise ConfigMismatch(f"{name} features have dim {x.shape[-1]}, model expects {want}")
        if "caption" in self.project and caption_empty is not None:
            raw["caption"] = torch.where(caption_empty[..., None], self.empty_caption.weight[0], caption)
        return {name: proj(raw[name]) for name, proj in self.project.items()}

    def encode(self, streams: dict[str, torch.Tensor], mask: torch.Tensor):
        """Run the attention stages; returns ``(fused, per_branch_streams)``."""
        for name, x in streams.items():
            if x.shape[:2] != mask.shape:
                raise MaskMismatch(f"{name} stream {tuple(x.shape[:2])} vs mask {tuple(mask.shape)}")
        # rows with no valid key would give NaN softmax; let them see everything
        key_mask = mask | ~mask.any(dim=1, keepdim=True)
        h = {}
        for name, x in streams.items():
            for block in self.self_attn[name]:
                x = block(x, key_mask)
            h[name] = x
        if self.use_caption_enhancement:
            for s in self.streams:
                x = h[s]
                for block in self.caption_cross[s]:
                    x = block(x, key_mask, context=h["caption"])
                h[s] = x
        if self.use_fusion:
            v, a = h["visual"], h["audio"]
            for layer in self.fusion:
                v, a = layer(v, a, key_mask)
            h["visual"], h["audio"] = v, a
        fused = self.fuse(self.fuse_norm(torch.cat([h[s] for s in self.streams], dim=-1)))
        return fused, {s: h[s] for s in self.streams if s in ("visual", "audio")}

    def classify_branch(self, features: torch.Tensor, branch: str) -> torch.Tensor:
        if branch not in self.cls_heads:
            raise UnknownBranch(f"no {branch!r} head; model has {list(self.cls_heads)}")
        return torch.sigmoid(self.cls_heads[branch](features).squeeze(-1))

    def regress_offsets(self, fused: torch.Tensor):
        out = F.relu(self.reg_head(fused)) * self.config.offset_scale
        return out[..., 0], out[..., 1]

    def forward(self, batch: Batch) -> ModelOutput:
        streams = self.project_inputs(batch.visual, batch.audio, batch.caption, batch.caption_empty)
        if self.config.positional_encoding:
            t = batch.mask.shape[1]
            pe = sinusoidal_encoding(t, self.config.d_model).to(batch.visual.dtype)
            streams = {k: v + pe for k, v in streams.items()}
        fused, branch = self.encode(streams, batch.mask)
        d_s, d_e = self.regress_offsets(fused)
        return ModelOutput(
            prob_visual=self.classify_branch(branch["visual"], "visual") if "visual" in branch else None,
            prob_audio=self.classify_branch(branch["audio"], "audio") if "audio" in branch else None,
            prob_fused=self.classify_branch(fused, "fused"),
            start_offset=d_s,
            end_offset=d_e,
            mask=batch.mask,
        )


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def build_model(config: ModelConfig, seed: int | None = None) -> RepurposeModel:
    if seed is not None:
        torch.manual_seed(seed)
    return RepurposeModel(config)


@torch.no_grad()
def predict_outputs(model: RepurposeModel, videos: Sequence[VideoSample], batch_size: int = 4) -> list[ModelOutput]:
    """Inference-mode forward over videos, returning per-video outputs."""
    was_training = model.training
    model.eval()
    outs = []
    try:
        for i in range(0, len(videos), batch_size):
            batch = collate(videos[i : i + batch_size], with_labels=False)
            outs.extend(model(batch).unbatch())
    finally:
        model.train(was_training)
    return outs


def check_feature_dims(config: ModelConfig, dims: tuple[int, int, int]) -> None:
    names = ("visual", "audio", "caption")
    letters = ("V", "A", "C")
    bad = [
        f"{n}: checkpoint expects {want}, data has {got}"
        for n, m, want, got in zip(names, letters, config.input_dims, dims)
        if m in config.modalities and want != got
    ]
    if bad:
        raise ConfigMismatch("feature dimension mismatch (" + "; ".join(bad) + ")")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, model: RepurposeModel, extra: dict | None = None) -> None:
    """Write parameters and config to a single ``.npz`` container."""
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {"format": CHECKPOINT_FORMAT, "config": model.config.to_dict(), "extra": extra or {}}
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> tuple[RepurposeModel, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ConfigMismatch(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
        state = {k[len("param/"):]: torch.from_numpy(data[k].copy()) for k in data.files if k.startswith("param/")}
    model = RepurposeModel(ModelConfig.from_dict(meta["config"]))
    model.load_state_dict(state)
    model.eval()
    return model, meta


def parameter_checksum(model: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for k, v in sorted(model.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()


__all__ = [
    "Batch",
    "CHECKPOINT_FORMAT",
    "ConfigMismatch",
    "MaskMismatch",
    "ModelConfig",
    "ModelOutput",
    "RepurposeModel",
    "UnknownBranch",
    "build_model",
    "check_feature_dims",
    "collate",
    "count_parameters",
    "load_checkpoint",
    "normalize_modalities",
    "parameter_checksum",
    "predict_outputs",
    "save_checkpoint",
]
