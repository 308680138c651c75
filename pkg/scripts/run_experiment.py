#!/usr/bin/env python3
"""Train and score the release configuration on the synthetic corpus.

Runs the whole weak-supervision pipeline in memory: corpus synthesis,
decoder pretrain, cycle training, dense-caption inference, and the
evaluation stack. Artifacts land in --out:

    final.ckpt        epoch-boundary checkpoint of the trained model
    losses.csv        per-step loss table (written during training)
    localization.json top-1 segment per ground-truth sentence, in seconds
    predictions.json  dense captions with timestamps
    summary.json      gate metrics: localization mIoU against the random
                      baseline, event recall, threshold-averaged captioning

The summary reports the same three numbers the release gates on: trained
mIoU >= 1.5x the seeded random-proposal baseline, recall at tIoU 0.5, and
threshold-averaged BLEU@1 of the dense captions.
"""

import argparse
import time
from pathlib import Path

import torch

from cyclecap.config import RunConfig, config_hash
from cyclecap.data import SynthSpec, generate_synthetic_corpus
from cyclecap.inference import (
    infer_corpus,
    localization_to_json,
    localize_corpus,
    predictions_to_json,
    sample_random_segments,
)
from cyclecap.jsonio import write_json
from cyclecap.metrics import (
    PredictedCaption,
    ReferenceCaption,
    caption_scores,
    localization_scores,
    recall_curve,
)
from cyclecap.segments import TemporalSegment, segment_to_seconds
from cyclecap.training import load_checkpoint, stable_seed, train_model


def synth_spec(cfg: RunConfig) -> SynthSpec:
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


def reference_index(corpus):
    """Ground-truth segments in seconds, keyed by video id."""
    ev = corpus.eval_view()
    return {
        entry.video_id: [
            segment_to_seconds(seg, entry.features.duration_seconds)
            for seg in ev.gt_segments(entry.video_id)
        ]
        for entry in corpus.entries
    }


def random_baseline(corpus, gt_seconds, seed: int):
    """mIoU of one uniform random segment per sentence, seeded like training."""
    generator = torch.Generator().manual_seed(stable_seed(seed, "baseline"))
    guesses = {}
    for entry in corpus.entries:
        segments = sample_random_segments(max(len(entry.captions), 1), generator)
        guesses[entry.video_id] = [
            segment_to_seconds(
                TemporalSegment(float(m), float(w)), entry.features.duration_seconds
            )
            for m, w in segments.tolist()
        ][: len(entry.captions)]
    return localization_scores(guesses, gt_seconds)


def evaluate(model, corpus, cfg: RunConfig, seed: int, out_dir: Path) -> dict:
    gt_seconds = reference_index(corpus)

    top1 = localize_corpus(model, corpus)
    write_json(out_dir / "localization.json", localization_to_json(top1))
    loc_report = localization_scores(
        top1, gt_seconds, sigmas=tuple(cfg.eval.localization_sigmas)
    )
    baseline = random_baseline(corpus, gt_seconds, seed)

    predictions = infer_corpus(model, corpus.vocab, corpus, cfg.infer)
    write_json(out_dir / "predictions.json", predictions_to_json(predictions))
    predicted = {
        vid: [PredictedCaption(e.sentence, e.timestamp) for e in pred.events]
        for vid, pred in predictions.items()
    }
    references = {
        entry.video_id: [
            ReferenceCaption(s, interval)
            for s, interval in zip(entry.sentences, gt_seconds[entry.video_id])
        ]
        for entry in corpus.entries
    }
    captioning = caption_scores(
        predicted, references, thresholds=tuple(cfg.eval.caption_tious)
    )
    recall = recall_curve(
        {vid: [p.interval for p in events] for vid, events in predicted.items()},
        {vid: [r.interval for r in refs] for vid, refs in references.items()},
        grid=tuple(cfg.eval.recall_grid),
    )
    num_events = sum(len(p.events) for p in predictions.values())

    ratio = loc_report.miou / max(baseline.miou, 1e-9)
    return {
        "seed": seed,
        "config_hash": config_hash(cfg),
        "localization": loc_report.to_json_dict(),
        "random_baseline_miou": baseline.miou,
        "miou_ratio": ratio,
        "recall": {f"{t:g}": r for t, r in recall},
        "captioning": captioning.to_json_dict(),
        "events_per_video": num_events / max(len(corpus.entries), 1),
        "gates": {
            "miou_vs_random": ratio >= 1.5,
            "recall_at_0.5": dict(recall)[0.5] >= 0.4,
            "bleu_1": captioning.overall["bleu_1"] >= 0.5,
        },
    }


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", required=True, help="artifact directory")
    parser.add_argument("--seed", type=int, default=0, help="master seed")
    parser.add_argument(
        "--quick", action="store_true",
        help="tiny corpus and schedule; smoke-tests the plumbing, not the gates",
    )
    args = parser.parse_args()
    torch.set_num_threads(1)

    cfg = RunConfig()
    cfg.set_master_seed(args.seed)
    if args.quick:
        cfg.synth.num_videos = 8
        cfg.synth.steps = 32
        cfg.synth.feature_dim = 8
        cfg.model.hidden_dim = 32
        cfg.train.batch_size = 8
        cfg.train.pretrain_epochs = 2
        cfg.train.stage1_epochs = 1
        cfg.train.stage2_epochs = 2

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = generate_synthetic_corpus(synth_spec(cfg))

    start = time.monotonic()
    result = train_model(corpus, cfg, out_dir)
    train_seconds = time.monotonic() - start
    model = load_checkpoint(result.final_checkpoint).model
    model.eval()

    summary = evaluate(model, corpus, cfg, args.seed, out_dir)
    summary["train_seconds"] = train_seconds
    summary["train_steps"] = result.steps
    write_json(out_dir / "summary.json", summary)

    gates = summary["gates"]
    print(
        f"seed {args.seed}: train {train_seconds:.0f}s, "
        f"miou {summary['localization']['miou']:.4f} "
        f"(random {summary['random_baseline_miou']:.4f}, "
        f"ratio {summary['miou_ratio']:.2f}), "
        f"recall@0.5 {summary['recall']['0.5']:.4f}, "
        f"bleu_1 {summary['captioning']['bleu_1']:.4f} "
        f"-> {'PASS' if all(gates.values()) else 'FAIL'} ({out_dir})"
    )
    return 0 if all(gates.values()) else 1


if __name__ == "__main__":
    raise SystemExit(main())
