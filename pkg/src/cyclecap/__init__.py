"""Weakly supervised dense event captioning.

Train a sentence localizer and an event captioner jointly from videos
paired with captions only, exploiting the two tasks' cycle: localize a
caption, re-caption the localized segment, and require consistency. At
test time, random segments are refined by one round of
localize-after-caption and kept when they are near fixed points.
"""

from .config import RunConfig
from .data import Corpus, SynthSpec, Vocabulary, generate_synthetic_corpus
from .inference import dense_caption, infer_corpus
from .metrics import caption_scores, localization_scores, recall_curve, tiou
from .model import CycleModel
from .segments import TemporalSegment
from .training import train_model

__all__ = [
    "Corpus",
    "CycleModel",
    "RunConfig",
    "SynthSpec",
    "TemporalSegment",
    "Vocabulary",
    "caption_scores",
    "dense_caption",
    "generate_synthetic_corpus",
    "infer_corpus",
    "localization_scores",
    "recall_curve",
    "tiou",
    "train_model",
]

__version__ = "0.1.0"
