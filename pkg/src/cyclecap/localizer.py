"""Sentence localizer: crossing attention between the two modalities, feature
fusion, anchor classification, and bounded offset regression.

The anchor grid evenly divides the timeline at several scales with 50%
overlap. Classification picks an anchor (non-differentiable argmax, trained
by its own loss); regression then moves the segment by at most half the
chosen anchor's width in either coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .encoders import EncodedSequence, ShapeError
from .segments import MIN_WIDTH, TemporalSegment


@dataclass(frozen=True)
class AnchorSet:
    """Multi-scale grid of candidate segments, coarse to fine."""

    anchors: tuple[TemporalSegment, ...]
    scales: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.anchors)

    def as_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor(
            [[a.center, a.width] for a in self.anchors], dtype=dtype
        )


def build_anchor_grid(scales) -> AnchorSet:
    """Centers run from w/2 to 1 - w/2 in steps of w/2 for each scale w."""
    scales = tuple(float(s) for s in scales)
    if not scales:
        raise ValueError("need at least one anchor scale")
    if any(not (0.0 < s <= 1.0) for s in scales):
        raise ValueError(f"scales must lie in (0, 1], got {scales}")
    if list(scales) != sorted(scales, reverse=True):
        raise ValueError(f"scales must be descending, got {scales}")
    anchors = []
    for width in scales:
        stride = width / 2.0
        n = int((1.0 - width) / stride + 1e-9) + 1
        for i in range(n):
            anchors.append(TemporalSegment(center=width / 2.0 + i * stride, width=width))
    return AnchorSet(anchors=tuple(anchors), scales=scales)


class LocalizerHead(nn.Module):
    """Bilinear attentions, pairwise fusion, anchor classifier, regressor."""

    def __init__(self, hidden_dim: int, num_anchors: int):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.num_anchors = num_anchors
        self.caption_bilinear = nn.Parameter(torch.empty(hidden_dim, hidden_dim))
        self.video_bilinear = nn.Parameter(torch.empty(hidden_dim, hidden_dim))
        self.pair_proj = nn.Linear(2 * hidden_dim, hidden_dim)
        self.anchor_classifier = nn.Linear(3 * hidden_dim, num_anchors)
        self.offset_regressor = nn.Linear(3 * hidden_dim, 2)


def _masked_attend(query: torch.Tensor, keys: torch.Tensor, bilinear: torch.Tensor,
                   lengths: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """softmax(query^T A keys) over valid steps, applied to the keys."""
    scores = torch.einsum("bd,de,bte->bt", query, bilinear, keys)
    steps = torch.arange(keys.shape[1], device=keys.device)
    invalid = steps.unsqueeze(0) >= lengths.unsqueeze(1)
    scores = scores.masked_fill(invalid, float("-inf"))
    weights = torch.softmax(scores, dim=1)
    return torch.einsum("bt,btd->bd", weights, keys), weights


def crossing_attention(
    venc: EncodedSequence, cenc: EncodedSequence, head: LocalizerHead
) -> tuple[torch.Tensor, torch.Tensor]:
    """Video final hidden attends over caption steps and vice versa.

    Returns (caption summary f_c, video summary f_v), each (B, d).
    """
    if venc.outputs.shape[-1] != cenc.outputs.shape[-1]:
        raise ShapeError(
            f"encoder dims differ: {venc.outputs.shape[-1]} vs {cenc.outputs.shape[-1]}"
        )
    f_c, _ = _masked_attend(
        venc.final_hidden, cenc.outputs, head.caption_bilinear, cenc.lengths
    )
    f_v, _ = _masked_attend(
        cenc.final_hidden, venc.outputs, head.video_bilinear, venc.lengths
    )
    return f_c, f_v


def attention_weights(
    venc: EncodedSequence, cenc: EncodedSequence, head: LocalizerHead
) -> tuple[torch.Tensor, torch.Tensor]:
    """The two attention distributions (over caption steps, over video steps)."""
    _, w_c = _masked_attend(
        venc.final_hidden, cenc.outputs, head.caption_bilinear, cenc.lengths
    )
    _, w_v = _masked_attend(
        cenc.final_hidden, venc.outputs, head.video_bilinear, venc.lengths
    )
    return w_c, w_v


def fuse_features(f_c: torch.Tensor, f_v: torch.Tensor, head: LocalizerHead) -> torch.Tensor:
    """[sum || product || FC(concat)] -> (B, 3d)."""
    return torch.cat(
        [f_c + f_v, f_c * f_v, head.pair_proj(torch.cat([f_c, f_v], dim=-1))], dim=-1
    )


def argmax_lowest(values: torch.Tensor) -> torch.Tensor:
    """Row-wise argmax with ties resolved to the lowest index."""
    n = values.shape[-1]
    is_max = values == values.max(dim=-1, keepdim=True).values
    rank = torch.arange(n, 0, -1, device=values.device)
    return (is_max.to(rank.dtype) * rank).argmax(dim=-1)


def localize(
    venc: EncodedSequence,
    cenc: EncodedSequence,
    head: LocalizerHead,
    anchors: AnchorSet,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Best anchor plus bounded regression offsets.

    Returns (segments (B, 2) as (center, width), anchor_logits (B, N_a),
    delta (B, 2)). Gradients flow through delta and the logits; the anchor
    choice itself is discrete.
    """
    if len(anchors) != head.num_anchors:
        raise ShapeError(f"head expects {head.num_anchors} anchors, got {len(anchors)}")
    f_c, f_v = crossing_attention(venc, cenc, head)
    fused = fuse_features(f_c, f_v, head)
    logits = head.anchor_classifier(fused)
    best = argmax_lowest(logits)
    grid = anchors.as_tensor(dtype=fused.dtype).to(fused.device)
    chosen = grid[best]                      # (B, 2), constant w.r.t. parameters
    half_width = 0.5 * chosen[:, 1:2]
    delta = half_width * torch.tanh(head.offset_regressor(fused))
    segments = chosen + delta
    segments = torch.stack(
        [
            segments[:, 0].clamp(0.0, 1.0),
            segments[:, 1].clamp(MIN_WIDTH, 1.0),
        ],
        dim=1,
    )
    return segments, logits, delta


def segments_from_tensor(segments: torch.Tensor) -> list[TemporalSegment]:
    return [TemporalSegment(float(m), float(w)) for m, w in segments.detach().cpu().tolist()]
