"""Dense event captioning at test time.

Random segments seed a one-round fixed-point refinement: caption the
segment, re-localize the caption, and keep proposals that land close to
where they started (high self-IoU), on the view that segments near true
events are near fixed points of localize-after-caption. Survivors are
deduplicated greedily and captioned by greedy decoding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .config import InferConfig
from .data import Corpus, CorpusEntry, Vocabulary
from .metrics import tiou_segments
from .model import CycleModel, token_lengths
from .segments import TemporalSegment, segment_to_seconds
from .training import stable_seed


@dataclass
class ProposalDiagnostics:
    initial: TemporalSegment
    refined: TemporalSegment
    self_iou: float
    empty_caption: bool = False


@dataclass
class EmittedEvent:
    sentence: str
    timestamp: tuple[float, float]  # seconds, clamped to [0, duration]
    self_iou: float


@dataclass
class VideoPrediction:
    video_id: str
    events: list[EmittedEvent]
    proposals: list[ProposalDiagnostics] = field(default_factory=list)
    contraction_ratios: list[float] = field(default_factory=list)

    @property
    def all_filtered(self) -> bool:
        return not self.events


def sample_random_segments(
    count: int, generator: torch.Generator, min_width: float = 0.05
) -> torch.Tensor:
    """(count, 2) segments with m ~ U(0,1) and w ~ U(min_width, 1)."""
    if count < 1:
        raise ValueError(f"need at least one proposal, got {count}")
    centers = torch.rand(count, generator=generator)
    widths = min_width + (1.0 - min_width) * torch.rand(count, generator=generator)
    return torch.stack([centers, widths], dim=1)


def refine_segments(
    model: CycleModel,
    features: torch.Tensor,
    lengths: torch.Tensor,
    segments: torch.Tensor,
    rounds: int = 1,
    venc=None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Apply localize(decode(.)) `rounds` times.

    Rows whose decoded caption is empty (immediate EOS) keep their current
    segment and are flagged. Returns (refined (B, 2), empty_flags (B,)).
    """
    if rounds < 0:
        raise ValueError(f"rounds must be >= 0, got {rounds}")
    with torch.no_grad():
        if venc is None:
            venc = model.encode_video(features, lengths)
        current = segments
        empty = torch.zeros(segments.shape[0], dtype=torch.bool)
        for _ in range(rounds):
            tokens = model.greedy_caption(features, lengths, current, venc=venc)
            has_body = token_lengths(tokens) > 2  # beyond BOS and EOS
            empty = empty | ~has_body
            loc = model.localize_encoded(venc, model.encode_caption(tokens))
            current = torch.where(has_body.unsqueeze(1), loc.segments, current)
        return current, empty


def filter_and_dedup(
    initials: list[TemporalSegment],
    refineds: list[TemporalSegment],
    keep_iou: float,
    merge_iou: float,
) -> tuple[list[int], list[float]]:
    """Self-consistency filter then greedy duplicate removal.

    Keeps index i when tIoU(initial_i, refined_i) >= keep_iou; survivors are
    visited by descending self-IoU (index breaks ties) and dropped when they
    overlap an already-kept refined segment at tIoU >= merge_iou. Returns
    (kept indices in visit order, self-IoU per input index).
    """
    if len(initials) != len(refineds):
        raise ValueError(f"{len(initials)} initial vs {len(refineds)} refined segments")
    self_ious = [tiou_segments(a, b) for a, b in zip(initials, refineds)]
    survivors = [i for i, iou in enumerate(self_ious) if iou >= keep_iou]
    survivors.sort(key=lambda i: (-self_ious[i], i))
    kept: list[int] = []
    for i in survivors:
        if all(tiou_segments(refineds[i], refineds[j]) < merge_iou for j in kept):
            kept.append(i)
    return kept, self_ious


def contraction_probe(
    model: CycleModel,
    features: torch.Tensor,
    lengths: torch.Tensor,
    segments: torch.Tensor,
    generator: torch.Generator,
    jitter: float = 0.02,
) -> list[float]:
    """Empirical contraction ratios of localize-after-decode near the given
    segments: ||F(s_a) - F(s_b)|| / ||s_a - s_b|| for jittered pairs.

    Purely diagnostic; ratios below 1 indicate locally contracting
    refinement, but no bound is guaranteed or asserted.
    """
    with torch.no_grad():
        noise = torch.randn(2, *segments.shape, generator=generator, dtype=segments.dtype)
        probes = (segments.unsqueeze(0) + jitter * noise).reshape(-1, 2)
        probes = torch.stack(
            [probes[:, 0].clamp(0.0, 1.0), probes[:, 1].clamp(0.05, 1.0)], dim=1
        )
        count = segments.shape[0]
        doubled = features[:1].expand(2 * count, -1, -1)
        doubled_lengths = lengths[:1].expand(2 * count)
        refined, empty = refine_segments(model, doubled, doubled_lengths, probes, rounds=1)
        a, b = probes[:count], probes[count:]
        fa, fb = refined[:count], refined[count:]
        bad = empty[:count] | empty[count:]
        ratios = []
        for i in range(count):
            if bool(bad[i]):
                continue
            gap = float(torch.linalg.vector_norm(a[i] - b[i]))
            if gap < 1e-6:
                continue
            ratios.append(float(torch.linalg.vector_norm(fa[i] - fb[i])) / gap)
        return ratios


def dense_caption(
    model: CycleModel,
    vocab: Vocabulary,
    entry: CorpusEntry,
    cfg: InferConfig,
    diagnostics: bool = False,
) -> VideoPrediction:
    """Full per-video pipeline; deterministic given (cfg.seed, video id)."""
    generator = torch.Generator().manual_seed(stable_seed(cfg.seed, "infer", entry.video_id))
    with torch.no_grad():
        features = torch.from_numpy(entry.features.values).unsqueeze(0)
        count = cfg.num_proposals
        batch_features = features.expand(count, -1, -1)
        batch_lengths = torch.full((count,), entry.features.steps, dtype=torch.long)
        initial = sample_random_segments(count, generator, min_width=cfg.min_width)
        venc = model.encode_video(batch_features, batch_lengths)
        refined, empty = refine_segments(
            model, batch_features, batch_lengths, initial, rounds=cfg.rounds, venc=venc
        )
        initial_segments = [TemporalSegment(float(m), float(w)) for m, w in initial.tolist()]
        refined_segments = [TemporalSegment(float(m), float(w)) for m, w in refined.tolist()]
        kept, self_ious = filter_and_dedup(
            initial_segments, refined_segments, cfg.keep_iou, cfg.merge_iou
        )

        events: list[EmittedEvent] = []
        if kept:
            kept_segments = refined[kept]
            tokens = model.greedy_caption(
                batch_features[: len(kept)],
                batch_lengths[: len(kept)],
                kept_segments,
                venc=None,
            )
            for row, idx in enumerate(kept):
                events.append(
                    EmittedEvent(
                        sentence=vocab.decode(tokens[row].tolist()),
                        timestamp=segment_to_seconds(
                            refined_segments[idx], entry.features.duration_seconds
                        ),
                        self_iou=self_ious[idx],
                    )
                )

        prediction = VideoPrediction(
            video_id=entry.video_id,
            events=events,
            proposals=[
                ProposalDiagnostics(
                    initial=initial_segments[i],
                    refined=refined_segments[i],
                    self_iou=self_ious[i],
                    empty_caption=bool(empty[i]),
                )
                for i in range(count)
            ],
        )
        if diagnostics:
            base = refined[kept] if kept else refined
            prediction.contraction_ratios = contraction_probe(
                model, features, batch_lengths[:1], base, generator
            )
        return prediction


def infer_corpus(
    model: CycleModel,
    vocab: Vocabulary,
    corpus: Corpus,
    cfg: InferConfig,
    diagnostics: bool = False,
) -> dict[str, VideoPrediction]:
    model.eval()
    return {
        entry.video_id: dense_caption(model, vocab, entry, cfg, diagnostics=diagnostics)
        for entry in corpus.entries
    }


def localize_corpus(model: CycleModel, corpus: Corpus) -> dict[str, list[tuple[float, float]]]:
    """Top-1 segment per (video, caption) pair, in seconds, aligned with the
    annotation's sentence order."""
    from .model import pad_captions

    model.eval()
    out: dict[str, list[tuple[float, float]]] = {}
    with torch.no_grad():
        for entry in corpus.entries:
            if not entry.captions:
                out[entry.video_id] = []
                continue
            count = len(entry.captions)
            features = torch.from_numpy(entry.features.values).unsqueeze(0).expand(count, -1, -1)
            lengths = torch.full((count,), entry.features.steps, dtype=torch.long)
            tokens, tok_lengths = pad_captions(entry.captions)
            loc = model.localize_sentence(features, lengths, tokens, tok_lengths)
            out[entry.video_id] = [
                segment_to_seconds(
                    TemporalSegment(float(m), float(w)), entry.features.duration_seconds
                )
                for m, w in loc.segments.tolist()
            ]
    return out


# ---------------------------------------------------------------------------
# Prediction JSON
# ---------------------------------------------------------------------------


def predictions_to_json(results: dict[str, VideoPrediction], diagnostics: bool = False) -> dict:
    body = {
        vid: [
            {
                "sentence": event.sentence,
                "timestamp": [event.timestamp[0], event.timestamp[1]],
                "self_iou": event.self_iou,
            }
            for event in results[vid].events
        ]
        for vid in sorted(results)
    }
    out: dict = {"results": body}
    if diagnostics:
        out["diagnostics"] = {
            vid: {
                "proposals": [
                    {
                        "initial": [p.initial.center, p.initial.width],
                        "refined": [p.refined.center, p.refined.width],
                        "self_iou": p.self_iou,
                        "empty_caption": p.empty_caption,
                    }
                    for p in results[vid].proposals
                ],
                "contraction_ratios": list(results[vid].contraction_ratios),
                "all_filtered": results[vid].all_filtered,
            }
            for vid in sorted(results)
        }
    return out


def localization_to_json(results: dict[str, list[tuple[float, float]]]) -> dict:
    return {
        "localization": {
            vid: [[lo, hi] for lo, hi in results[vid]] for vid in sorted(results)
        }
    }
