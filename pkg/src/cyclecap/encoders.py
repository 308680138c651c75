"""Gated recurrent sequence encoders for video features and caption tokens.

Single-layer GRUs with outputs taken as the hidden-state sequence. Inputs are
batched and padded; the final hidden is the hidden at the last valid step of
each sequence, so trailing padding never leaks into downstream features.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .data import PAD_ID


class ShapeError(ValueError):
    """Input shape inconsistent with module configuration."""


@dataclass
class EncodedSequence:
    """Per-step encoder outputs plus the hidden at each row's last valid step.

    outputs and hiddens coincide for a single GRU cell; both views are kept
    because downstream consumers name them differently.
    """

    outputs: torch.Tensor      # (B, T, d)
    hiddens: torch.Tensor      # (B, T, d)
    final_hidden: torch.Tensor  # (B, d)
    lengths: torch.Tensor      # (B,) valid step counts


def uniform_init_(module: nn.Module, hidden_dim: int, generator: torch.Generator) -> None:
    """uniform(-1/sqrt(d), 1/sqrt(d)) for every weight and bias."""
    bound = hidden_dim ** -0.5
    for param in module.parameters():
        with torch.no_grad():
            param.uniform_(-bound, bound, generator=generator)


def gather_final_hidden(hiddens: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    index = (lengths - 1).clamp(min=0).view(-1, 1, 1).expand(-1, 1, hiddens.shape[-1])
    return hiddens.gather(1, index).squeeze(1)


class VideoEncoder(nn.Module):
    """Projects k-dim feature rows to the hidden size and runs a GRU."""

    def __init__(self, feature_dim: int, hidden_dim: int):
        super().__init__()
        self.feature_dim = feature_dim
        self.hidden_dim = hidden_dim
        self.input_proj = nn.Linear(feature_dim, hidden_dim)
        self.rnn = nn.GRU(hidden_dim, hidden_dim, batch_first=True)

    def forward(self, features: torch.Tensor, lengths: torch.Tensor) -> EncodedSequence:
        if features.ndim != 3 or features.shape[-1] != self.feature_dim:
            raise ShapeError(
                f"expected (B, T, {self.feature_dim}) features, got {tuple(features.shape)}"
            )
        if features.shape[1] < 2:
            raise ShapeError(f"need at least 2 time steps, got {features.shape[1]}")
        hiddens, _ = self.rnn(self.input_proj(features))
        return EncodedSequence(
            outputs=hiddens,
            hiddens=hiddens,
            final_hidden=gather_final_hidden(hiddens, lengths),
            lengths=lengths,
        )


class CaptionEncoder(nn.Module):
    """Embeds token ids and runs a GRU; PAD steps are skipped via lengths."""

    def __init__(self, vocab_size: int, hidden_dim: int):
        super().__init__()
        self.vocab_size = vocab_size
        self.hidden_dim = hidden_dim
        self.embedding = nn.Embedding(vocab_size, hidden_dim, padding_idx=PAD_ID)
        self.rnn = nn.GRU(hidden_dim, hidden_dim, batch_first=True)

    def forward(self, token_ids: torch.Tensor, lengths: torch.Tensor) -> EncodedSequence:
        if token_ids.ndim != 2:
            raise ShapeError(f"expected (B, T) token ids, got {tuple(token_ids.shape)}")
        if int(token_ids.max()) >= self.vocab_size:
            raise ShapeError(
                f"token id {int(token_ids.max())} out of range for vocab {self.vocab_size}"
            )
        hiddens, _ = self.rnn(self.embedding(token_ids))
        return EncodedSequence(
            outputs=hiddens,
            hiddens=hiddens,
            final_hidden=gather_final_hidden(hiddens, lengths),
            lengths=lengths,
        )
