"""Command-line pipeline: synth -> train -> infer -> eval.

Every command resolves one RunConfig (defaults, then --config file, then
--set overrides, then --seed) and echoes it next to its outputs, so any
run can be replayed from the echo alone. Exit codes: 0 success, 2 input
or configuration error, 3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch

from . import config as cfgmod
from .config import ConfigError, RunConfig
from .data import (
    Corpus,
    CorpusError,
    SynthSpec,
    Vocabulary,
    build_vocabulary,
    generate_synthetic_corpus,
    load_annotation_json,
    write_annotation_json,
    write_feature_file,
)
from .inference import (
    infer_corpus,
    localization_to_json,
    localize_corpus,
    predictions_to_json,
)
from .jsonio import write_json
from .metrics import (
    PredictedCaption,
    ReferenceCaption,
    caption_scores,
    localization_scores,
    recall_curve,
)
from .segments import segment_to_seconds
from .training import TrainingDiverged, load_checkpoint, train_model

RESOLVED_CONFIG_NAME = "config_resolved.txt"


def _build_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfgmod.load_config_file(args.config, cfg)
    for pair in getattr(args, "set", None) or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        cfgmod.set_key(cfg, key.strip(), value)
    if getattr(args, "seed", None) is not None:
        cfg.set_master_seed(args.seed)
    return cfg


def _echo_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / RESOLVED_CONFIG_NAME).write_text(cfgmod.to_text(cfg), encoding="utf-8")


def _synth_spec(cfg: RunConfig) -> SynthSpec:
    s = cfg.synth
    return SynthSpec(
        num_videos=s.num_videos,
        steps=s.steps,
        feature_dim=s.feature_dim,
        num_event_types=s.num_event_types,
        events_per_video_range=(s.events_min, s.events_max),
        background_noise_std=s.noise_std,
        seed=s.seed,
    )


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _build_config(args)
    out_dir = Path(args.out)
    if out_dir.exists() and not args.force:
        raise CorpusError(f"output directory {out_dir} exists; pass --force to overwrite")
    features_dir = out_dir / "features"
    features_dir.mkdir(parents=True, exist_ok=True)

    corpus = generate_synthetic_corpus(_synth_spec(cfg))
    gt_view = corpus.eval_view()
    records = {}
    total_events = 0
    for entry in corpus.entries:
        write_feature_file(features_dir / f"{entry.video_id}.bin", entry.features)
        duration = entry.features.duration_seconds
        timestamps = [
            list(segment_to_seconds(seg, duration))
            for seg in gt_view.gt_segments(entry.video_id)
        ]
        records[entry.video_id] = {
            "duration": duration,
            "sentences": list(entry.sentences),
            "timestamps": timestamps,
        }
        total_events += len(entry.sentences)
    write_annotation_json(out_dir / "annotations.json", records)
    corpus.vocab.save(out_dir / "vocab.txt")
    _echo_config(cfg, out_dir)

    mean_events = total_events / len(corpus.entries) if corpus.entries else 0.0
    print(
        f"synth: {len(corpus.entries)} videos, {total_events} events "
        f"({mean_events:.2f}/video), vocab {len(corpus.vocab)} -> {out_dir}"
    )
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _load_weak_corpus(annotations, features_dir, vocab, max_caption_len) -> Corpus:
    corpus = load_annotation_json(
        annotations, features_dir, vocab, mode="weak", max_caption_len=max_caption_len
    )
    if not corpus.entries:
        raise CorpusError(f"{annotations}: no usable videos")
    return corpus


def _training_vocab(args, annotations, cap: int) -> Vocabulary:
    if args.vocab:
        return Vocabulary.load(args.vocab)
    with open(annotations, encoding="utf-8") as f:
        raw = json.load(f)
    sentences = [s for record in raw.values() for s in record.get("sentences", [])]
    return build_vocabulary(sentences, cap=cap)


def cmd_train(args) -> int:
    cfg = _build_config(args)
    out_dir = Path(args.out)
    vocab = _training_vocab(args, args.annotations, cfg.data.vocab_cap)
    corpus = _load_weak_corpus(args.annotations, args.features, vocab, cfg.data.max_caption_len)
    _echo_config(cfg, out_dir)
    result = train_model(corpus, cfg, out_dir, resume_from=args.resume)
    print(
        f"train: {result.steps} steps, checkpoints "
        f"{', '.join(sorted(p.name for p in result.checkpoints.values()))} "
        f"-> {result.final_checkpoint}"
    )
    return 0


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------


def cmd_infer(args) -> int:
    cfg = _build_config(args)
    bundle = load_checkpoint(args.checkpoint)
    model = bundle.model
    corpus = _load_weak_corpus(
        args.annotations, args.features, bundle.vocab, model.max_caption_len
    )
    corpus_dim = corpus.entries[0].features.dim
    if corpus_dim != model.feature_dim:
        raise CorpusError(
            f"feature dim mismatch: checkpoint {args.checkpoint} expects "
            f"k={model.feature_dim}, corpus {args.annotations} provides k={corpus_dim}"
        )
    out_dir = Path(args.out)
    _echo_config(cfg, out_dir)

    if args.task == "localize":
        results = localize_corpus(model, corpus)
        out_path = out_dir / "localization.json"
        write_json(out_path, localization_to_json(results))
        total = sum(len(v) for v in results.values())
        print(f"infer: localized {total} sentences over {len(results)} videos -> {out_path}")
    else:
        results = infer_corpus(
            model, bundle.vocab, corpus, cfg.infer, diagnostics=args.dump_diagnostics
        )
        out_path = out_dir / "predictions.json"
        write_json(out_path, predictions_to_json(results, diagnostics=args.dump_diagnostics))
        total = sum(len(v.events) for v in results.values())
        empty = sum(1 for v in results.values() if v.all_filtered)
        print(
            f"infer: {total} events over {len(results)} videos "
            f"({empty} empty) -> {out_path}"
        )
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _load_references(path) -> dict[str, list[ReferenceCaption]]:
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    if not isinstance(raw, dict):
        raise CorpusError(f"{path}: top level must be an object")
    references: dict[str, list[ReferenceCaption]] = {}
    for vid, record in raw.items():
        sentences = record.get("sentences", [])
        timestamps = record.get("timestamps")
        if timestamps is None:
            raise CorpusError(f"{path}: {vid} has no timestamps; cannot evaluate")
        if len(timestamps) != len(sentences):
            raise CorpusError(f"{path}: {vid} timestamps do not align with sentences")
        references[vid] = [
            ReferenceCaption(sentence=s, interval=(float(t[0]), float(t[1])))
            for s, t in zip(sentences, timestamps)
        ]
    return references


def _load_prediction_events(path) -> dict[str, list[PredictedCaption]]:
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    results = raw.get("results")
    if not isinstance(results, dict):
        raise CorpusError(f"{path}: expected a top-level 'results' object")
    out: dict[str, list[PredictedCaption]] = {}
    for vid, events in results.items():
        out[vid] = [
            PredictedCaption(
                sentence=e["sentence"],
                interval=(float(e["timestamp"][0]), float(e["timestamp"][1])),
            )
            for e in events
        ]
    return out


def _load_localization(path) -> dict[str, list[tuple[float, float]]]:
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    results = raw.get("localization")
    if not isinstance(results, dict):
        raise CorpusError(f"{path}: expected a top-level 'localization' object")
    return {
        vid: [(float(t[0]), float(t[1])) for t in pairs] for vid, pairs in results.items()
    }


def _intersect_ids(predictions: dict, references: dict) -> list[str]:
    shared = sorted(set(predictions) & set(references))
    missing = sorted(set(references) - set(predictions))
    extra = sorted(set(predictions) - set(references))
    if missing:
        print(f"eval: {len(missing)} videos lack predictions: {missing[:5]}...", file=sys.stderr)
    if extra:
        print(f"eval: {len(extra)} predicted videos lack references: {extra[:5]}...",
              file=sys.stderr)
    if not shared:
        raise CorpusError("no video ids shared between predictions and annotations")
    return shared


def cmd_eval(args) -> int:
    cfg = _build_config(args)
    out_dir = Path(args.out)
    references = _load_references(args.annotations)
    _echo_config(cfg, out_dir)
    report_path = out_dir / "report.json"

    if args.mode == "captioning":
        predictions = _load_prediction_events(args.predictions)
        shared = _intersect_ids(predictions, references)
        report = caption_scores(
            {vid: predictions[vid] for vid in shared},
            {vid: references[vid] for vid in shared},
            thresholds=tuple(cfg.eval.caption_tious),
        )
        write_json(report_path, report.to_json_dict())
        print(
            f"eval: captioning over {report.num_gt_videos} videos, "
            f"bleu_1 {report.overall['bleu_1']:.4f}, cider {report.overall['cider']:.4f} "
            f"-> {report_path}"
        )
    elif args.mode == "localization":
        predictions = _load_localization(args.predictions)
        shared = _intersect_ids(predictions, references)
        report = localization_scores(
            {vid: predictions[vid] for vid in shared},
            {vid: [ref.interval for ref in references[vid]] for vid in shared},
            sigmas=tuple(cfg.eval.localization_sigmas),
        )
        write_json(report_path, report.to_json_dict())
        print(
            f"eval: localization over {report.num_sentences} sentences, "
            f"miou {report.miou:.4f} -> {report_path}"
        )
    else:  # recall
        predictions = _load_prediction_events(args.predictions)
        shared = _intersect_ids(predictions, references)
        curve = recall_curve(
            {vid: [p.interval for p in predictions[vid]] for vid in shared},
            {vid: [ref.interval for ref in references[vid]] for vid in shared},
            grid=tuple(cfg.eval.recall_grid),
        )
        if curve is None:
            raise CorpusError("annotations carry no ground-truth events")
        write_json(report_path, {"recall": {f"{t:g}": r for t, r in curve}})
        csv_path = out_dir / "recall.csv"
        with open(csv_path, "w", encoding="utf-8", newline="\n") as f:
            f.write("threshold,recall\n")
            for threshold, recall in curve:
                f.write(f"{threshold:g},{recall:.6f}\n")
        print(f"eval: recall curve over {len(shared)} videos -> {report_path}, {csv_path}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="config file of section.key=value lines")
    parser.add_argument(
        "--set", action="append", metavar="KEY=VALUE", help="override one config key"
    )
    parser.add_argument("--seed", type=int, help="master seed overriding per-stage seeds")
    parser.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cyclecap",
        description="Weakly supervised dense event captioning: corpus synthesis, "
        "cycle training, fixed-point inference, and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic corpus")
    _add_config_flags(p)
    p.add_argument("--force", action="store_true", help="overwrite an existing directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run pretrain, stage 1, and stage 2")
    _add_config_flags(p)
    p.add_argument("--annotations", required=True, help="annotation JSON")
    p.add_argument("--features", required=True, help="directory of feature binaries")
    p.add_argument("--vocab", help="vocabulary file (default: build from annotations)")
    p.add_argument("--resume", help="epoch-boundary checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="dense captioning or sentence localization")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--annotations", required=True, help="annotation JSON")
    p.add_argument("--features", required=True, help="directory of feature binaries")
    p.add_argument("--task", choices=("dense", "localize"), default="dense")
    p.add_argument(
        "--dump-diagnostics",
        action="store_true",
        help="include per-proposal diagnostics and contraction ratios",
    )
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against annotations")
    _add_config_flags(p)
    p.add_argument("--predictions", required=True, help="prediction JSON from infer")
    p.add_argument("--annotations", required=True, help="annotation JSON with timestamps")
    p.add_argument(
        "--mode", choices=("captioning", "localization", "recall"), default="captioning"
    )
    p.set_defaults(func=cmd_eval)
    return parser


def entry(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        kept = f" (last checkpoint: {exc.last_checkpoint})" if exc.last_checkpoint else ""
        print(f"error: {exc}{kept}", file=sys.stderr)
        return 3
    except (ConfigError, CorpusError, FileNotFoundError, NotADirectoryError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(entry())


if __name__ == "__main__":
    main()
