"""Corpus construction: vocabulary, synthetic event videos, annotation
ingestion, and the binary feature-file format.

Ground-truth segments are evaluation-only. A corpus loaded in "weak" mode
raises on any attempt to read them; training code only ever sees weak-mode
corpora, so the supervision firewall is structural rather than by
convention.
"""

from __future__ import annotations

import json
import logging
import string
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .segments import TemporalSegment, seconds_to_segment

log = logging.getLogger(__name__)

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")
NUM_SPECIALS = len(SPECIAL_TOKENS)

FEATURE_MAGIC = b"WSDC"
FEATURE_VERSION = 1

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


class CorpusError(ValueError):
    """Malformed annotation or feature data."""


class WeakSupervisionError(RuntimeError):
    """Raised when code tries to read ground-truth segments in weak mode."""


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return text.lower().translate(_PUNCT_TABLE).split()


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------


class Vocabulary:
    """Token <-> id mapping with four reserved specials at ids 0-3."""

    def __init__(self, tokens: list[str] | None = None):
        self.id_to_token: list[str] = list(SPECIAL_TOKENS) + list(tokens or [])
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise CorpusError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, sentence: str, max_len: int = 30) -> "CaptionTokens":
        """Tokenize and wrap in BOS/EOS, truncating the body to fit max_len."""
        body = [self.token_to_id.get(t, UNK_ID) for t in tokenize(sentence)]
        body = body[: max_len - 2]
        return CaptionTokens(ids=(BOS_ID, *body, EOS_ID))

    def decode(self, ids) -> str:
        """Render token ids as a sentence, dropping sentinels and padding."""
        words = []
        for i in ids:
            if i == EOS_ID:
                break
            if i in (PAD_ID, BOS_ID):
                continue
            words.append(self.id_to_token[i])
        return " ".join(words)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for token in self.id_to_token[NUM_SPECIALS:]:
                f.write(token + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f if line.rstrip("\n")]
        return cls(tokens)


def build_vocabulary(sentences, cap: int = 6000) -> Vocabulary:
    """Keep the most frequent tokens up to `cap` (including the 4 specials).

    Ties are broken lexicographically; an empty corpus yields a vocabulary
    of specials only.
    """
    if cap < 5:
        raise ValueError(f"vocabulary cap must be >= 5, got {cap}")
    counts = Counter()
    for sentence in sentences:
        counts.update(tokenize(sentence))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [token for token, _ in ranked[: cap - NUM_SPECIALS]]
    return Vocabulary(kept)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CaptionTokens:
    """Bounded token-id sequence with BOS/EOS sentinels."""

    ids: tuple[int, ...]

    def __post_init__(self):
        if len(self.ids) < 2 or self.ids[0] != BOS_ID or self.ids[-1] != EOS_ID:
            raise CorpusError(f"caption must be BOS...EOS, got {self.ids}")
        if EOS_ID in self.ids[:-1]:
            raise CorpusError("EOS before final position")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def body(self) -> tuple[int, ...]:
        return self.ids[1:-1]


@dataclass
class VideoFeatures:
    """T_v x k matrix of per-step feature vectors plus wall-clock duration."""

    values: np.ndarray
    duration_seconds: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise CorpusError(f"features must be 2-D, got shape {self.values.shape}")
        if self.steps < 2 or self.dim < 1:
            raise CorpusError(f"need T_v >= 2 and k >= 1, got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise CorpusError("non-finite feature values")
        if self.duration_seconds <= 0:
            raise CorpusError(f"duration must be positive, got {self.duration_seconds}")

    @property
    def steps(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass
class CorpusEntry:
    """One video with its caption list. Ground truth lives on the Corpus."""

    video_id: str
    features: VideoFeatures
    sentences: list[str]
    captions: list[CaptionTokens]


@dataclass
class LoadReport:
    videos_loaded: int = 0
    missing_feature_files: int = 0
    dropped_captions: int = 0


class Corpus:
    """Videos with caption lists; gt segments gated behind the mode flag."""

    def __init__(
        self,
        entries: list[CorpusEntry],
        gt: dict[str, tuple[TemporalSegment, ...]] | None = None,
        mode: str = "weak",
        load_report: LoadReport | None = None,
        vocab: Vocabulary | None = None,
    ):
        if mode not in ("weak", "eval"):
            raise ValueError(f"mode must be 'weak' or 'eval', got {mode!r}")
        for entry in entries:
            if gt is not None and entry.video_id in gt:
                if len(gt[entry.video_id]) != len(entry.captions):
                    raise CorpusError(
                        f"{entry.video_id}: {len(gt[entry.video_id])} gt segments "
                        f"vs {len(entry.captions)} captions"
                    )
        self.entries = entries
        self._gt = gt
        self.mode = mode
        self.load_report = load_report
        self.vocab = vocab

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def has_gt(self) -> bool:
        return self._gt is not None

    def gt_segments(self, video_id: str) -> tuple[TemporalSegment, ...]:
        """Per-caption ground-truth segments; evaluation-only access."""
        if self.mode == "weak":
            raise WeakSupervisionError(
                "ground-truth segments are not readable in weak-supervision mode"
            )
        if self._gt is None or video_id not in self._gt:
            raise KeyError(f"no ground-truth segments for {video_id!r}")
        return self._gt[video_id]

    def eval_view(self) -> "Corpus":
        """Same data with ground truth unlocked; the weak view stays locked."""
        return Corpus(
            self.entries,
            self._gt,
            mode="eval",
            load_report=self.load_report,
            vocab=self.vocab,
        )


# ---------------------------------------------------------------------------
# Feature file format: b"WSDC", u32 version, u32 T_v, u32 k, float32 rows.
# ---------------------------------------------------------------------------


def write_feature_file(path, features: VideoFeatures) -> None:
    values = np.ascontiguousarray(features.values, dtype="<f4")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<III", FEATURE_VERSION, values.shape[0], values.shape[1]))
        f.write(values.tobytes())


def read_feature_file(path, duration_seconds: float) -> VideoFeatures:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != FEATURE_MAGIC:
            raise CorpusError(f"{path}: bad magic {magic!r}")
        version, steps, dim = struct.unpack("<III", f.read(12))
        if version != FEATURE_VERSION:
            raise CorpusError(f"{path}: unsupported version {version}")
        payload = f.read(steps * dim * 4)
        if len(payload) != steps * dim * 4:
            raise CorpusError(f"{path}: truncated payload")
        values = np.frombuffer(payload, dtype="<f4").reshape(steps, dim)
    return VideoFeatures(values=values.copy(), duration_seconds=duration_seconds)


# ---------------------------------------------------------------------------
# Annotation JSON ingestion
# ---------------------------------------------------------------------------


def load_annotation_json(
    path,
    features_dir,
    vocab: Vocabulary,
    mode: str = "weak",
    max_caption_len: int = 30,
) -> Corpus:
    """Load `{video_id: {duration, sentences, timestamps?}}` plus one feature
    file per video id.

    Captions are tokenized through `vocab` (unknown words map to <unk>);
    timestamps are converted to normalized (center, width). Videos without a
    feature file are skipped and counted; caption/timestamp pairs with
    end <= start are dropped and counted.
    """
    features_dir = Path(features_dir)
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    if not isinstance(raw, dict):
        raise CorpusError(f"{path}: top level must be an object")

    entries: list[CorpusEntry] = []
    gt: dict[str, tuple[TemporalSegment, ...]] = {}
    any_timestamps = False
    report = LoadReport()

    for video_id, record in raw.items():
        if not isinstance(record, dict):
            raise CorpusError(f"{video_id}: record must be an object")
        try:
            duration = float(record["duration"])
        except (KeyError, TypeError, ValueError):
            raise CorpusError(f"{video_id}: missing or non-numeric 'duration'")
        if duration <= 0:
            raise CorpusError(f"{video_id}: 'duration' must be positive")
        sentences = record.get("sentences")
        if not isinstance(sentences, list) or not all(isinstance(s, str) for s in sentences):
            raise CorpusError(f"{video_id}: 'sentences' must be a list of strings")
        timestamps = record.get("timestamps")
        if timestamps is not None:
            if not isinstance(timestamps, list) or len(timestamps) != len(sentences):
                raise CorpusError(f"{video_id}: 'timestamps' must align with 'sentences'")

        feature_path = features_dir / f"{video_id}.bin"
        if not feature_path.exists():
            report.missing_feature_files += 1
            log.warning("no feature file for %s, skipping", video_id)
            continue
        features = read_feature_file(feature_path, duration)

        kept_sentences: list[str] = []
        kept_captions: list[CaptionTokens] = []
        kept_segments: list[TemporalSegment] = []
        for i, sentence in enumerate(sentences):
            segment = None
            if timestamps is not None:
                pair = timestamps[i]
                if not isinstance(pair, list) or len(pair) != 2:
                    raise CorpusError(f"{video_id}: 'timestamps'[{i}] must be [start, end]")
                start, end = float(pair[0]), float(pair[1])
                if end <= start:
                    report.dropped_captions += 1
                    continue
                segment = seconds_to_segment(start, end, duration)
            kept_sentences.append(sentence)
            kept_captions.append(vocab.encode(sentence, max_len=max_caption_len))
            if segment is not None:
                kept_segments.append(segment)
        entries.append(
            CorpusEntry(
                video_id=video_id,
                features=features,
                sentences=kept_sentences,
                captions=kept_captions,
            )
        )
        if timestamps is not None:
            gt[video_id] = tuple(kept_segments)
            any_timestamps = True
        report.videos_loaded += 1

    return Corpus(
        entries,
        gt=gt if any_timestamps else None,
        mode=mode,
        load_report=report,
        vocab=vocab,
    )


def write_annotation_json(path, records: dict) -> None:
    """Write the annotation schema with deterministic formatting."""
    with open(path, "w", encoding="utf-8") as f:
        json.dump(records, f, indent=2)
        f.write("\n")


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Desk-scale synthetic corpus layout: a few event types with distinct
    feature signatures and fixed template captions."""

    num_videos: int = 200
    steps: int = 64
    feature_dim: int = 32
    num_event_types: int = 3
    events_per_video_range: tuple[int, int] = (1, 4)
    background_noise_std: float = 1.0
    seed: int = 7

    def __post_init__(self):
        lo, hi = self.events_per_video_range
        if min(self.num_videos, self.steps, self.feature_dim, self.num_event_types, lo) < 1:
            raise ValueError("all SynthSpec counts must be positive")
        if hi < lo:
            raise ValueError("events_per_video_range must be (lo, hi) with hi >= lo")
        if self.background_noise_std <= 0:
            raise ValueError("background_noise_std must be positive")


# Word slots per event type; every word is type-specific so captions identify
# their event. Lengths cycle over 3..6 tokens.
_SLOT_WORDS = ("agent", "motion", "target", "manner", "scene", "tempo")

# Event lengths in 64ths of the video, scaled to other step counts. Template
# captions carry no extent information, so the band stays narrow enough that
# localization is mostly about placing the segment, while still spanning the
# two finest anchor widths (8 and 16 frames at 64 steps) so anchor ranking
# has unambiguous winners at both ends.
_EVENT_LEN_64 = (8, 16)


def _event_length_bounds(steps: int) -> tuple[int, int]:
    lo = max(2, (_EVENT_LEN_64[0] * steps) // 64)
    return lo, max(lo, (_EVENT_LEN_64[1] * steps) // 64)


def _template_sentence(event_type: int) -> str:
    return " ".join(f"{_SLOT_WORDS[j]}{event_type}" for j in range(3 + event_type % 4))


def _place_events(rng: np.random.Generator, steps: int, lengths: list[int]):
    """Non-overlapping frame spans with the given lengths; drops trailing
    events while the total does not fit."""
    lengths = list(lengths)
    while lengths:
        free = steps - sum(lengths)
        if free >= 0:
            cuts = np.sort(rng.integers(0, free + 1, size=len(lengths)))
            gaps = np.concatenate([[cuts[0]], np.diff(cuts)])
            spans = []
            cursor = 0
            for gap, length in zip(gaps, lengths):
                start = cursor + int(gap)
                spans.append((start, start + int(length)))
                cursor = start + int(length)
            return spans
        lengths.pop()
    return []


def generate_synthetic_corpus(spec: SynthSpec) -> Corpus:
    """Deterministic synthetic corpus of non-overlapping events. An event of
    type e adds a type-specific mean shift (3x the background std, per
    component) over its frames and is described by that type's template
    caption."""
    rng = np.random.default_rng(spec.seed)
    sigma = spec.background_noise_std

    # Per-component +-3*sigma sign signature per event type.
    signatures = (
        rng.choice([-1.0, 1.0], size=(spec.num_event_types, spec.feature_dim)) * 3.0 * sigma
    )
    captions = [_template_sentence(e) for e in range(spec.num_event_types)]
    vocab = build_vocabulary(captions, cap=6000)

    len_lo, len_hi = _event_length_bounds(spec.steps)

    entries: list[CorpusEntry] = []
    gt: dict[str, tuple[TemporalSegment, ...]] = {}
    for v in range(spec.num_videos):
        lo, hi = spec.events_per_video_range
        # One event per type at most: duplicate types would repeat the same
        # template caption within a video, and a caption that names two
        # segments has no well-defined ground-truth alignment.
        count = min(int(rng.integers(lo, hi + 1)), spec.num_event_types)
        lengths = [int(rng.integers(len_lo, len_hi + 1)) for _ in range(count)]
        spans = _place_events(rng, spec.steps, lengths)
        types = rng.permutation(spec.num_event_types)[: len(spans)]

        values = rng.normal(0.0, sigma, size=(spec.steps, spec.feature_dim))
        sentences = []
        segments = []
        for (start, end), event_type in zip(spans, types):
            values[start:end] += signatures[event_type]
            sentences.append(_template_sentence(int(event_type)))
            segments.append(
                TemporalSegment(
                    center=(start + end) / 2.0 / spec.steps,
                    width=(end - start) / spec.steps,
                )
            )

        video_id = f"synth{v:04d}"
        features = VideoFeatures(
            values=values.astype(np.float32), duration_seconds=float(spec.steps)
        )
        entries.append(
            CorpusEntry(
                video_id=video_id,
                features=features,
                sentences=sentences,
                captions=[vocab.encode(s) for s in sentences],
            )
        )
        gt[video_id] = tuple(segments)

    return Corpus(entries, gt=gt, mode="weak", vocab=vocab)


def synthetic_vocabulary(spec: SynthSpec) -> Vocabulary:
    """The vocabulary implied by a synthetic spec's template captions."""
    captions = [_template_sentence(e) for e in range(spec.num_event_types)]
    return build_vocabulary(captions, cap=6000)
