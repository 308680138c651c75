"""Evaluation stack: temporal IoU, sentence-level caption metrics, tIoU-gated
dense-captioning scores, event-detection recall curves, and sentence
localization R@1 / mIoU.

Caption metrics are sentence-level and self-contained: BLEU with clipped
n-gram precision and brevity penalty, ROUGE-L F-measure over the longest
common subsequence, CIDEr as 10x the mean TF-IDF n-gram cosine for
n = 1..4 (idf from the reference corpus), and a recall-weighted unigram
F-mean standing in for METEOR (labelled meteor_proxy in every report; it
is not METEOR and is never compared against METEOR numbers). Aggregation
uses math.fsum so reports are invariant to input ordering.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

from .data import tokenize
from .segments import TemporalSegment

Interval = tuple[float, float]

CAPTION_METRICS = ("bleu_1", "bleu_2", "bleu_3", "bleu_4", "rouge_l", "cider", "meteor_proxy")
DEFAULT_CAPTION_THRESHOLDS = (0.3, 0.5, 0.7, 0.9)
DEFAULT_RECALL_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
DEFAULT_LOCALIZATION_SIGMAS = (0.1, 0.3, 0.5)
CIDER_MAX_N = 4


# ---------------------------------------------------------------------------
# Temporal IoU
# ---------------------------------------------------------------------------


def tiou(a: Interval, b: Interval) -> float:
    """|intersection| / |union| of two intervals; 0 when disjoint or empty."""
    len_a = max(0.0, a[1] - a[0])
    len_b = max(0.0, b[1] - b[0])
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = len_a + len_b - inter
    return inter / union if union > 0.0 else 0.0


def tiou_segments(a: TemporalSegment, b: TemporalSegment) -> float:
    return tiou(a.bounds(), b.bounds())


# ---------------------------------------------------------------------------
# Sentence-level caption metrics
# ---------------------------------------------------------------------------


def ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: list[str], references: list[list[str]], max_n: int = 4) -> float:
    """Sentence BLEU@max_n: geometric mean of clipped n-gram precisions times
    the brevity penalty. Zero when any order has no match."""
    if not candidate or not references:
        return 0.0
    log_precisions = []
    for n in range(1, max_n + 1):
        total = len(candidate) - n + 1
        if total <= 0:
            return 0.0
        cand = ngram_counts(candidate, n)
        best = Counter()
        for ref in references:
            for gram, count in ngram_counts(ref, n).items():
                if count > best[gram]:
                    best[gram] = count
        clipped = sum(min(count, best[gram]) for gram, count in cand.items())
        if clipped == 0:
            return 0.0
        log_precisions.append(math.log(clipped / total))
    c = len(candidate)
    r = min((len(ref) for ref in references), key=lambda length: (abs(length - c), length))
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(math.fsum(log_precisions) / max_n)


def _lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: list[str], references: list[list[str]], beta: float = 1.2) -> float:
    """LCS F-measure, best reference taken when several are given."""
    if not candidate or not references:
        return 0.0
    best = 0.0
    for ref in references:
        lcs = _lcs_length(candidate, ref)
        if lcs == 0 or not ref:
            continue
        precision = lcs / len(candidate)
        recall = lcs / len(ref)
        f = (1 + beta**2) * recall * precision / (recall + beta**2 * precision)
        best = max(best, f)
    return best


def meteor_proxy(candidate: list[str], references: list[list[str]]) -> float:
    """Recall-weighted unigram F-mean on exact matches, 10PR / (R + 9P).

    A deliberately simple stand-in; reported under its own name, never as
    METEOR.
    """
    if not candidate or not references:
        return 0.0
    cand = Counter(candidate)
    best = 0.0
    for ref in references:
        if not ref:
            continue
        matched = sum(min(count, Counter(ref)[token]) for token, count in cand.items())
        if matched == 0:
            continue
        precision = matched / len(candidate)
        recall = matched / len(ref)
        best = max(best, 10.0 * precision * recall / (recall + 9.0 * precision))
    return best


class CiderIdf:
    """Document frequencies over reference sentences for n = 1..4.

    idf(n, gram) = log(num_sentences / df) with df clipped to at least 1 so
    candidate-only n-grams stay finite.
    """

    def __init__(self, reference_token_lists: list[list[str]], max_n: int = CIDER_MAX_N):
        self.max_n = max_n
        self.num_sentences = len(reference_token_lists)
        self.df: list[Counter] = [Counter() for _ in range(max_n)]
        for tokens in reference_token_lists:
            for n in range(1, max_n + 1):
                for gram in set(ngram_counts(tokens, n)):
                    self.df[n - 1][gram] += 1

    def idf(self, n: int, gram: tuple[str, ...]) -> float:
        if self.num_sentences == 0:
            return 0.0
        return math.log(self.num_sentences / max(self.df[n - 1][gram], 1))


def cider(candidate: list[str], references: list[list[str]], idf: CiderIdf) -> float:
    """10x the mean over n = 1..4 of the TF-IDF n-gram cosine, averaged over
    references when several are given."""
    if not candidate or not references:
        return 0.0
    ref_scores = []
    for ref in references:
        sims = []
        for n in range(1, idf.max_n + 1):
            g_cand = {
                gram: count * idf.idf(n, gram)
                for gram, count in ngram_counts(candidate, n).items()
            }
            g_ref = {
                gram: count * idf.idf(n, gram)
                for gram, count in ngram_counts(ref, n).items()
            }
            norm_c = math.sqrt(math.fsum(v * v for v in g_cand.values()))
            norm_r = math.sqrt(math.fsum(v * v for v in g_ref.values()))
            if norm_c == 0.0 or norm_r == 0.0:
                sims.append(0.0)
                continue
            dot = math.fsum(g_cand[g] * g_ref[g] for g in g_cand if g in g_ref)
            sims.append(dot / (norm_c * norm_r))
        ref_scores.append(math.fsum(sims) / idf.max_n)
    return 10.0 * math.fsum(ref_scores) / len(ref_scores)


# ---------------------------------------------------------------------------
# tIoU-gated dense-captioning report
# ---------------------------------------------------------------------------


@dataclass
class PredictedCaption:
    sentence: str
    interval: Interval  # same time unit as the references


@dataclass
class ReferenceCaption:
    sentence: str
    interval: Interval


@dataclass
class CaptionScoreReport:
    """Threshold-averaged scores plus the per-threshold breakdown."""

    overall: dict[str, float]
    per_threshold: dict[float, dict[str, float]]
    thresholds: tuple[float, ...]
    num_gt_videos: int
    num_predictions: int

    def to_json_dict(self) -> dict:
        out: dict = {name: self.overall[name] for name in CAPTION_METRICS}
        out["per_threshold"] = {
            f"{threshold:g}": {
                name: self.per_threshold[threshold][name] for name in CAPTION_METRICS
            }
            for threshold in self.thresholds
        }
        out["num_gt_videos"] = self.num_gt_videos
        out["num_predictions"] = self.num_predictions
        return out


def _score_pair(
    cand_tokens: list[str], ref_tokens: list[str], idf: CiderIdf
) -> dict[str, float]:
    refs = [ref_tokens]
    return {
        "bleu_1": bleu(cand_tokens, refs, max_n=1),
        "bleu_2": bleu(cand_tokens, refs, max_n=2),
        "bleu_3": bleu(cand_tokens, refs, max_n=3),
        "bleu_4": bleu(cand_tokens, refs, max_n=4),
        "rouge_l": rouge_l(cand_tokens, refs),
        "cider": cider(cand_tokens, refs, idf),
        "meteor_proxy": meteor_proxy(cand_tokens, refs),
    }


def caption_scores(
    predictions: dict[str, list[PredictedCaption]],
    references: dict[str, list[ReferenceCaption]],
    thresholds: tuple[float, ...] = DEFAULT_CAPTION_THRESHOLDS,
) -> CaptionScoreReport:
    """Gated scoring: a prediction is scored against its highest-tIoU
    reference when that tIoU clears the threshold, else it contributes 0.

    Per threshold, scores average over predictions within a video, then
    over videos that carry ground truth (a gt-bearing video with no
    predictions counts as 0). The headline numbers average the thresholds.
    """
    if not thresholds:
        raise ValueError("need at least one tIoU threshold")
    gt_videos = [vid for vid in sorted(references) if references[vid]]
    idf = CiderIdf(
        [tokenize(ref.sentence) for vid in gt_videos for ref in references[vid]]
    )

    pair_cache: dict[str, list[tuple[float, dict[str, float]]]] = {}
    for vid in gt_videos:
        refs = references[vid]
        ref_tokens = [tokenize(ref.sentence) for ref in refs]
        scored = []
        for pred in predictions.get(vid, []):
            ious = [tiou(pred.interval, ref.interval) for ref in refs]
            best = max(range(len(refs)), key=lambda i: (ious[i], -i))
            scored.append(
                (ious[best], _score_pair(tokenize(pred.sentence), ref_tokens[best], idf))
            )
        pair_cache[vid] = scored

    per_threshold: dict[float, dict[str, float]] = {}
    for threshold in thresholds:
        video_means: dict[str, list[float]] = {name: [] for name in CAPTION_METRICS}
        for vid in gt_videos:
            scored = pair_cache[vid]
            for name in CAPTION_METRICS:
                if not scored:
                    video_means[name].append(0.0)
                    continue
                values = [
                    scores[name] if best_iou >= threshold else 0.0
                    for best_iou, scores in scored
                ]
                video_means[name].append(math.fsum(values) / len(values))
        per_threshold[threshold] = {
            name: (math.fsum(video_means[name]) / len(gt_videos) if gt_videos else 0.0)
            for name in CAPTION_METRICS
        }

    overall = {
        name: math.fsum(per_threshold[t][name] for t in thresholds) / len(thresholds)
        for name in CAPTION_METRICS
    }
    return CaptionScoreReport(
        overall=overall,
        per_threshold=per_threshold,
        thresholds=tuple(thresholds),
        num_gt_videos=len(gt_videos),
        num_predictions=sum(len(v) for v in predictions.values()),
    )


# ---------------------------------------------------------------------------
# Event-detection recall and sentence localization
# ---------------------------------------------------------------------------


def recall_curve(
    predicted_segments: dict[str, list[Interval]],
    gt_segments: dict[str, list[Interval]],
    grid: tuple[float, ...] = DEFAULT_RECALL_GRID,
) -> list[tuple[float, float]] | None:
    """recall(t) = fraction of gt events covered by some prediction at
    tIoU >= t, pooled over videos. None when there is no ground truth."""
    best_ious: list[float] = []
    for vid in sorted(gt_segments):
        preds = predicted_segments.get(vid, [])
        for gt in gt_segments[vid]:
            best_ious.append(max((tiou(p, gt) for p in preds), default=0.0))
    if not best_ious:
        return None
    total = len(best_ious)
    return [
        (threshold, sum(1 for iou in best_ious if iou >= threshold) / total)
        for threshold in grid
    ]


@dataclass
class LocalizationReport:
    """Top-1 sentence localization quality."""

    r_at_1: dict[float, float] = field(default_factory=dict)
    miou: float = 0.0
    num_sentences: int = 0

    def to_json_dict(self) -> dict:
        out = {f"r_at_1@{sigma:g}": self.r_at_1[sigma] for sigma in sorted(self.r_at_1)}
        out["miou"] = self.miou
        return out


def localization_scores(
    predictions: dict[str, list[Interval]],
    gt: dict[str, list[Interval]],
    sigmas: tuple[float, ...] = DEFAULT_LOCALIZATION_SIGMAS,
) -> LocalizationReport:
    """R@1 per sigma plus mean tIoU over aligned (video, sentence) pairs."""
    ious: list[float] = []
    for vid in sorted(gt):
        gt_list = gt[vid]
        pred_list = predictions.get(vid)
        if pred_list is None:
            raise ValueError(f"no localization predictions for video {vid!r}")
        if len(pred_list) != len(gt_list):
            raise ValueError(
                f"{vid!r}: {len(pred_list)} predictions vs {len(gt_list)} gt sentences"
            )
        ious.extend(tiou(p, g) for p, g in zip(pred_list, gt_list))
    if not ious:
        return LocalizationReport(r_at_1={s: 0.0 for s in sigmas}, miou=0.0, num_sentences=0)
    total = len(ious)
    return LocalizationReport(
        r_at_1={
            sigma: sum(1 for iou in ious if iou >= sigma) / total for sigma in sigmas
        },
        miou=math.fsum(ious) / total,
        num_sentences=total,
    )
