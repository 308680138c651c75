"""Caption generator: differentiable soft clipping of the timeline, masked
mean pooling of raw features, and a GRU decoder with per-step context
injection.

The mask is a sigmoid difference that is ~1 inside [m - w/2, m + w/2] and
~0 outside, so pooled context stays differentiable in the segment
coordinates. When a segment covers essentially no frames the pool falls
back to a plain mean (flagged) instead of dividing by ~0.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .data import BOS_ID, EOS_ID, PAD_ID

MASK_SUM_FLOOR = 1e-8


@dataclass(frozen=True)
class MaskConfig:
    scale: float = 50.0  # sharpness K of the sigmoid window on normalized time

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"mask scale must be positive, got {self.scale}")


def soft_mask(t_norm, segments, cfg: MaskConfig):
    """Sigmoid window around a segment, evaluated at normalized times.

    Broadcasts `t_norm` (..., T) against `segments` (..., 2); the trailing
    segment axis holds (center, width).
    """
    k = cfg.scale
    center = segments[..., 0:1]
    half = segments[..., 1:2] / 2.0
    return torch.sigmoid(k * (t_norm - (center - half))) - torch.sigmoid(
        k * (t_norm - (center + half))
    )


def frame_times(lengths: torch.Tensor, max_steps: int, dtype) -> torch.Tensor:
    """Normalized time of each frame: step t (1-based) sits at t / T_v."""
    steps = torch.arange(1, max_steps + 1, dtype=dtype, device=lengths.device)
    return steps.unsqueeze(0) / lengths.to(dtype).unsqueeze(1)


def masked_pool(
    features: torch.Tensor,
    lengths: torch.Tensor,
    segments: torch.Tensor,
    cfg: MaskConfig,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Mask-weighted mean of feature rows.

    features: (B, T, k); lengths: (B,); segments: (B, 2) or (B, N, 2).
    Returns (context, fallback) where context is (B, k) or (B, N, k) and
    fallback flags rows whose mask sum was below the floor.
    """
    squeeze = segments.ndim == 2
    if squeeze:
        segments = segments.unsqueeze(1)
    times = frame_times(lengths, features.shape[1], features.dtype)      # (B, T)
    valid = (
        torch.arange(features.shape[1], device=features.device).unsqueeze(0)
        < lengths.unsqueeze(1)
    ).to(features.dtype)
    weights = soft_mask(times.unsqueeze(1), segments, cfg) * valid.unsqueeze(1)  # (B, N, T)
    totals = weights.sum(dim=-1)                                          # (B, N)
    fallback = totals < MASK_SUM_FLOOR
    pooled = torch.einsum("bnt,btk->bnk", weights, features) / totals.clamp_min(
        MASK_SUM_FLOOR
    ).unsqueeze(-1)
    mean = (features * valid.unsqueeze(-1)).sum(dim=1) / lengths.to(features.dtype).unsqueeze(1)
    context = torch.where(fallback.unsqueeze(-1), mean.unsqueeze(1), pooled)
    if squeeze:
        return context.squeeze(1), fallback.squeeze(1)
    return context, fallback


def boundary_hidden_index(segments: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    """Frame index (0-based) of the hidden state at the segment's right edge.

    segments (B, 2) or (B, N, 2); lengths (B,). Result matches the segment
    batch shape.
    """
    edge = (segments[..., 0] + segments[..., 1] / 2.0).clamp(0.0, 1.0)
    scale = lengths.to(edge.dtype).view(-1, *([1] * (edge.ndim - 1)))
    idx = torch.round(edge * scale)
    return (idx.clamp(min=1) - 1).long().clamp(max=int(lengths.max()) - 1)


class Decoder(nn.Module):
    """GRU decoder fed [token embedding || projected context] at every step."""

    def __init__(self, vocab_size: int, feature_dim: int, hidden_dim: int,
                 embedding: nn.Embedding, max_caption_len: int = 30):
        super().__init__()
        self.vocab_size = vocab_size
        self.hidden_dim = hidden_dim
        self.max_caption_len = max_caption_len
        self.embedding = embedding  # shared with the caption encoder
        self.context_proj = nn.Linear(feature_dim, hidden_dim)
        self.rnn = nn.GRU(2 * hidden_dim, hidden_dim, batch_first=True)
        self.output_proj = nn.Linear(hidden_dim, vocab_size)

    def _step_inputs(self, tokens: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        embedded = self.embedding(tokens)
        ctx = self.context_proj(context).unsqueeze(1).expand(-1, tokens.shape[1], -1)
        return torch.cat([embedded, ctx], dim=-1)

    def teacher_forced(
        self, context: torch.Tensor, init_hidden: torch.Tensor, tokens: torch.Tensor
    ) -> torch.Tensor:
        """Next-token logits aligned to tokens[:, 1:]; shape (B, T-1, V)."""
        inputs = self._step_inputs(tokens[:, :-1], context)
        outputs, _ = self.rnn(inputs, init_hidden.unsqueeze(0).contiguous())
        return self.output_proj(outputs)

    def generate(
        self,
        context: torch.Tensor,
        init_hidden: torch.Tensor,
        temperature: float | None = None,
        generator: torch.Generator | None = None,
    ) -> torch.Tensor:
        """Emit token rows [BOS, ..., EOS] (PAD-filled past each row's EOS).

        Greedy when temperature is None, otherwise softmax sampling at the
        given temperature (deterministic per generator).
        """
        batch = context.shape[0]
        device = context.device
        tokens = torch.full((batch, 1), BOS_ID, dtype=torch.long, device=device)
        hidden = init_hidden.unsqueeze(0).contiguous()
        finished = torch.zeros(batch, dtype=torch.bool, device=device)
        rows = [tokens]
        for _ in range(self.max_caption_len - 1):
            inputs = self._step_inputs(tokens, context)
            outputs, hidden = self.rnn(inputs, hidden)
            logits = self.output_proj(outputs[:, -1])
            if temperature is None:
                step = logits.argmax(dim=-1)
            else:
                probs = torch.softmax(logits / temperature, dim=-1)
                step = torch.multinomial(probs, 1, generator=generator).squeeze(1)
            step = torch.where(finished, torch.full_like(step, PAD_ID), step)
            remaining = self.max_caption_len - 1 - len(rows)
            if remaining == 0:
                step = torch.where(finished, step, torch.full_like(step, EOS_ID))
            finished = finished | (step == EOS_ID)
            tokens = step.unsqueeze(1)
            rows.append(tokens)
            if bool(finished.all()):
                break
        return torch.cat(rows, dim=1)


def generated_lengths(tokens: torch.Tensor) -> torch.Tensor:
    """Length of each generated row counting BOS through EOS."""
    return (tokens != PAD_ID).sum(dim=1)
