"""Command-line entry points.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .core import ReproError
from .data import (
    CorruptContainer,
    DatasetManifest,
    InvalidConfig,
    ManifestEntry,
    SchemaError,
    SyntheticConfig,
    generate_synthetic,
    load_manifest_videos,
    load_video,
    split_manifest,
    write_corpus,
)
from .evaluation import EvalReport, TIOU_THRESHOLDS, predict_videos, prediction_dump, score_predictions, top_k_for_duration
from .losses import NonFiniteLoss

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

logger = logging.getLogger("repurpose_loc")

KEY_ALIASES = {
    "λ1": "uni_focal", "λ2": "mul_focal", "λ3": "alignment", "λ4": "iou",
    "lambda1": "uni_focal", "lambda2": "mul_focal", "lambda3": "alignment", "lambda4": "iou",
}

LAYER_SPLITS = ((1, 4, 4), (3, 3, 3), (5, 2, 2), (7, 1, 1))
MODALITY_ROWS = ("A", "V", "C", "AV", "AVC")
LOSS_TERM_ROWS = ((False, False), (True, False), (False, True), (True, True))


class UsageError(ReproError):
    pass


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` overrides; values are parsed as JSON when possible."""
    config = json.loads(json.dumps(config))
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        parts = [KEY_ALIASES.get(p, p) for p in key.strip().split(".")]
        node = config
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise UsageError(f"cannot set {key}: {p} is not a section")
        node[parts[-1]] = _parse_value(value)
    return config


def load_config(path: str | None, overrides: list[str], seed: int | None) -> dict:
    raw = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config not found: {p}")
        raw = json.loads(p.read_text())
    raw = apply_overrides(raw, overrides)
    if seed is not None:
        raw["seed"] = seed
    return raw


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def hash_paths(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(x) for x in paths):
        if p.is_dir():
            for f in sorted(p.rglob("*")):
                if f.is_file():
                    h.update(str(f.relative_to(p)).encode())
                    h.update(f.read_bytes())
        elif p.exists():
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def write_run_record(out: Path, command: str, config: dict, inputs: list, artifacts: dict) -> dict:
    snapshot = json.loads(canonical_json(config))
    input_hash = hash_paths(inputs)
    run_id = hashlib.sha256((command + canonical_json(snapshot) + input_hash).encode()).hexdigest()[:12]
    record = {
        "run_id": f"{command}-{run_id}",
        "command": command,
        "config_snapshot": snapshot,
        "input_hash": input_hash,
        "artifacts": artifacts,
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(canonical_json(snapshot))
    (out / "run.json").write_text(canonical_json(record))
    return record


def _load_manifest(path: Path) -> DatasetManifest:
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    return DatasetManifest.load(path)


def _manifest_dir(data_dir: Path) -> Path:
    return data_dir / "manifests" if (data_dir / "manifests").is_dir() else data_dir


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    raw = load_config(args.config, args.set, args.seed)
    config = SyntheticConfig.from_dict(raw)
    out = Path(args.out)
    samples = generate_synthetic(config)
    entries = write_corpus(samples, out)
    splits = split_manifest(entries, seed=config.seed)
    (out / "manifests").mkdir(parents=True, exist_ok=True)
    paths = {}
    for m in splits:
        # manifests live one level below the corpus root
        rel = DatasetManifest(
            [ManifestEntry(e.video_id, e.duration, f"../{e.feature_path}", f"../{e.annotation_path}") for e in m.entries],
            m.split,
        )
        p = out / "manifests" / f"{m.split}.json"
        rel.save(p)
        paths[m.split] = str(p.relative_to(out))
    durations = np.array([s.duration for s in samples])
    clips = np.array([len(s.clips) for s in samples])
    stats = {
        "videos": len(samples),
        "mean_duration_s": float(durations.mean()),
        "clips_per_10min": float(clips.sum() / durations.sum() * 600.0),
        "split_sizes": {m.split: len(m) for m in splits},
        "packing_notes": sum(len(s.warnings) for s in samples),
    }
    (out / "stats.json").write_text(canonical_json(stats))
    write_run_record(out, "synth", config.to_dict(), [], {"manifests": paths, "stats": "stats.json"})
    print(f"videos: {stats['videos']}  mean duration: {stats['mean_duration_s']:.1f}s  "
          f"clips/10min: {stats['clips_per_10min']:.2f}  split: {stats['split_sizes']}")
    return EXIT_OK


def _train_config(args):
    from .train import TrainConfig

    raw = load_config(args.config, args.set, args.seed)
    try:
        return TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(f"bad training config: {exc}") from exc


def _run_training(config, data_dir: Path, out: Path, eval_split: str = "val"):
    from .model import check_feature_dims
    from .train import train

    mdir = _manifest_dir(data_dir)
    train_m = _load_manifest(mdir / "train.json")
    val_m = _load_manifest(mdir / f"{eval_split}.json")
    train_videos = load_manifest_videos(train_m)
    val_videos = load_manifest_videos(val_m)
    check_feature_dims(config.model, train_videos[0].feature_dims)
    result = train(config, train_videos, val_videos, out_dir=out / "logs")
    ckpt = out / "checkpoint.npz"
    (out / "logs" / "checkpoint.npz").replace(ckpt)
    return result, ckpt, [mdir / "train.json", mdir / f"{eval_split}.json"]


def cmd_train(args) -> int:
    from .evaluation import evaluate

    config = _train_config(args)
    out = Path(args.out)
    data_dir = Path(args.data)
    result, ckpt, inputs = _run_training(config, data_dir, out)
    reports = out / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    val_videos = load_manifest_videos(_load_manifest(_manifest_dir(data_dir) / "val.json"))
    report = evaluate(result.model, val_videos)
    (reports / "val_report.json").write_text(report.dumps())
    (reports / "val_report.txt").write_text(report.table(",".join(config.ablation.modalities)))
    write_run_record(out, "train", config.to_dict(), inputs, {
        "checkpoint": str(ckpt.relative_to(out)),
        "step_log": "logs/train_log.jsonl",
        "epoch_log": "logs/epochs.jsonl",
        "val_report": "reports/val_report.json",
        "parameter_checksum": result.checksum,
    })
    print(f"best epoch {result.best_epoch}  val avg mAP {result.best_val_map:.4f}")
    return EXIT_OK


def _resolve_model(checkpoint: str):
    if checkpoint == "oracle":
        return "oracle", {"format": "oracle"}
    from .model import load_checkpoint

    return load_checkpoint(checkpoint)


def cmd_eval(args) -> int:
    from .model import check_feature_dims

    model, meta = _resolve_model(args.checkpoint)
    manifest_path = Path(args.manifest)
    manifest = _load_manifest(manifest_path)
    videos = load_manifest_videos(manifest)
    if model != "oracle" and videos:
        check_feature_dims(model.config, videos[0].feature_dims)
    predictions = predict_videos(model, videos)
    report = score_predictions(predictions, {v.video_id: list(v.clips) for v in videos})
    out = Path(args.out)
    reports = out / "reports"
    (reports / "predictions").mkdir(parents=True, exist_ok=True)
    for v in videos:
        (reports / "predictions" / f"{v.video_id}.json").write_text(
            canonical_json(prediction_dump(v.video_id, predictions[v.video_id])))
    (reports / "eval_report.json").write_text(report.dumps())
    (reports / "eval_report.txt").write_text(report.table())
    inputs = [manifest_path] + ([args.checkpoint] if args.checkpoint != "oracle" else [])
    write_run_record(out, "eval", {"checkpoint": args.checkpoint, "manifest": str(manifest_path),
                                   "model": meta.get("config")}, inputs,
                     {"report": "reports/eval_report.json", "table": "reports/eval_report.txt",
                      "predictions": "reports/predictions"})
    print(report.table(), end="")
    print(f"average mAP: {report.average:.4f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    from .model import check_feature_dims

    model, _ = _resolve_model(args.checkpoint)
    ann = Path(args.annotation)
    raw = json.loads(ann.read_text())
    entry = ManifestEntry(raw.get("video_id", ann.stem), float(raw.get("duration", 0)), str(args.features), str(ann))
    video = load_video(entry, strict=not args.lenient)
    if model != "oracle":
        check_feature_dims(model.config, video.feature_dims)
    preds = predict_videos(model, [video])[video.video_id]
    text = canonical_json(prediction_dump(video.video_id, preds))
    if args.out:
        out = Path(args.out)
        if out.suffix == ".json":
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_text(text)
        else:
            write_run_record(out, "predict", {"checkpoint": args.checkpoint, "lenient": bool(args.lenient)},
                             [args.features, ann] + ([args.checkpoint] if args.checkpoint != "oracle" else []),
                             {"prediction": "prediction.json"})
            (out / "prediction.json").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def ablation_variants(axis: str, base: dict) -> list[tuple[str, dict]]:
    variants = []
    if axis == "modality":
        for mods in MODALITY_ROWS:
            label = "&".join(mods)
            variants.append((label, apply_overrides(base, [f"ablation.modalities={json.dumps(list(mods))}"])))
    elif axis == "loss_terms":
        for uf, al in LOSS_TERM_ROWS:
            label = f"UF={'on' if uf else 'off'} AL={'on' if al else 'off'}"
            variants.append((label, apply_overrides(base, [
                "ablation.modalities=[\"A\",\"V\",\"C\"]",
                f"ablation.uni_focal_on={json.dumps(uf)}",
                f"ablation.alignment_on={json.dumps(al)}",
            ])))
    elif axis == "layer_split":
        for ns, nc, nf in LAYER_SPLITS:
            variants.append((f"{ns}/{nc}/{nf}", apply_overrides(base, [
                f"model.n_self_layers={ns}", f"model.n_caption_layers={nc}", f"model.n_fusion_layers={nf}",
            ])))
    else:
        raise UsageError(f"unknown ablation axis {axis!r}; choose modality, loss_terms or layer_split")
    return variants


def format_table(rows: list[tuple[str, EvalReport]]) -> str:
    width = max([len(r[0]) for r in rows] + [8]) + 2
    lines = [f"{'variant':<{width}}" + "".join(f"{t:>8.1f}" for t in TIOU_THRESHOLDS) + f"{'Avg.':>8}"]
    for label, rep in rows:
        lines.append(f"{label:<{width}}" + "".join(f"{100 * rep.ap_per_threshold[t]:>8.2f}" for t in TIOU_THRESHOLDS)
                     + f"{100 * rep.average:>8.2f}")
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    from .evaluation import evaluate
    from .train import TrainConfig

    base = load_config(args.config, args.set, args.seed)
    variants = ablation_variants(args.axis, base)
    out = Path(args.out)
    data_dir = Path(args.data)
    mdir = _manifest_dir(data_dir)
    eval_split = "test" if (mdir / "test.json").exists() else "val"
    eval_videos = load_manifest_videos(_load_manifest(mdir / f"{eval_split}.json"))
    rows = []
    for i, (label, raw) in enumerate(variants):
        config = TrainConfig.from_dict(raw)
        run_dir = out / f"variant_{i}"
        result, _, _ = _run_training(config, data_dir, run_dir)
        report = evaluate(result.model, eval_videos)
        (run_dir / "reports").mkdir(parents=True, exist_ok=True)
        (run_dir / "reports" / f"{eval_split}_report.json").write_text(report.dumps())
        rows.append((label, report))
        print(f"[{i + 1}/{len(variants)}] {label}: avg mAP {report.average:.4f}", flush=True)
    table = format_table(rows)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    (out / "reports" / "ablation.txt").write_text(table)
    (out / "reports" / "ablation.json").write_text(canonical_json(
        {"axis": args.axis, "split": eval_split, "rows": [{"variant": l, **r.to_json()} for l, r in rows]}))
    write_run_record(out, "ablate", {"axis": args.axis, "base": base}, [mdir],
                     {"table": "reports/ablation.txt", "summary": "reports/ablation.json"})
    print(table, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (dotted path), repeatable")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output run directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="repurpose-loc", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus with 8/1/1 manifests")
    p.set_defaults(func=cmd_synth, needs_out=True)

    p = sub.add_parser("train", parents=[common], help="train on <data>/manifests/{train,val}.json")
    p.add_argument("--data", required=True, help="corpus directory (as written by synth)")
    p.set_defaults(func=cmd_train, needs_out=True)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True, help="checkpoint .npz, or 'oracle' for ground-truth outputs")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_eval, needs_out=True)

    p = sub.add_parser("predict", parents=[common], help="predict clips for one video")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True, help="directory holding visual/audio/caption arrays")
    p.add_argument("--annotation", required=True, help="annotation JSON (duration and captions; clips may be empty)")
    p.add_argument("--lenient", action="store_true", help="truncate surplus feature rows instead of failing")
    p.set_defaults(func=cmd_predict, needs_out=False)

    p = sub.add_parser("ablate", parents=[common], help="sweep one ablation axis")
    p.add_argument("--axis", required=True, help="modality | loss_terms | layer_split")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_ablate, needs_out=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.needs_out and not args.out:
        parser.error(f"{args.command} requires --out")
    try:
        return args.func(args)
    except (UsageError, InvalidConfig) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLoss as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, SchemaError, CorruptContainer, ReproError, OSError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
