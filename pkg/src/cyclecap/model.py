"""The joint model: shared encoders feeding a sentence localizer and a
segment-conditioned caption decoder.

One parameter set serves both directions of the cycle. The decoder reads
raw features pooled under the localized segment's soft mask plus the video
encoder hidden at the segment's right edge, so captions depend on the
segment through two differentiable paths.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .captioner import Decoder, MaskConfig, boundary_hidden_index, masked_pool
from .config import ModelConfig
from .data import PAD_ID, CaptionTokens
from .encoders import CaptionEncoder, EncodedSequence, VideoEncoder, uniform_init_
from .localizer import AnchorSet, LocalizerHead, build_anchor_grid, localize


@dataclass
class Localization:
    segments: torch.Tensor      # (B, 2) normalized (center, width)
    anchor_logits: torch.Tensor  # (B, N_a)
    delta: torch.Tensor         # (B, 2) regression offsets actually applied


def pad_captions(captions: list[CaptionTokens], device=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack variable-length captions into a PAD-filled id matrix."""
    if not captions:
        raise ValueError("need at least one caption")
    width = max(len(c) for c in captions)
    tokens = torch.full((len(captions), width), PAD_ID, dtype=torch.long, device=device)
    for row, caption in enumerate(captions):
        tokens[row, : len(caption)] = torch.tensor(caption.ids, dtype=torch.long, device=device)
    lengths = torch.tensor([len(c) for c in captions], dtype=torch.long, device=device)
    return tokens, lengths


def token_lengths(tokens: torch.Tensor) -> torch.Tensor:
    return (tokens != PAD_ID).sum(dim=1)


class CycleModel(nn.Module):
    """Localizer l(V, C) -> S and captioner g(V, S) -> C over shared encoders."""

    def __init__(
        self,
        vocab_size: int,
        feature_dim: int,
        hidden_dim: int = 512,
        anchor_scales: tuple[float, ...] = (1.0, 0.5, 0.25, 0.125),
        mask_scale: float = 50.0,
        max_caption_len: int = 30,
        init_seed: int = 0,
    ):
        super().__init__()
        self.vocab_size = vocab_size
        self.feature_dim = feature_dim
        self.hidden_dim = hidden_dim
        self.max_caption_len = max_caption_len
        self.init_seed = init_seed
        self.anchors: AnchorSet = build_anchor_grid(anchor_scales)
        self.mask = MaskConfig(scale=mask_scale)
        self.video_encoder = VideoEncoder(feature_dim, hidden_dim)
        self.caption_encoder = CaptionEncoder(vocab_size, hidden_dim)
        self.localizer = LocalizerHead(hidden_dim, len(self.anchors))
        self.decoder = Decoder(
            vocab_size,
            feature_dim,
            hidden_dim,
            embedding=self.caption_encoder.embedding,
            max_caption_len=max_caption_len,
        )
        self.reset_parameters(init_seed)

    @classmethod
    def from_config(
        cls, cfg: ModelConfig, vocab_size: int, feature_dim: int, max_caption_len: int = 30
    ) -> "CycleModel":
        return cls(
            vocab_size=vocab_size,
            feature_dim=feature_dim,
            hidden_dim=cfg.hidden_dim,
            anchor_scales=tuple(cfg.anchor_scales),
            mask_scale=cfg.mask_scale,
            max_caption_len=max_caption_len,
            init_seed=cfg.init_seed,
        )

    def reset_parameters(self, seed: int) -> None:
        generator = torch.Generator().manual_seed(seed)
        uniform_init_(self, self.hidden_dim, generator)
        with torch.no_grad():
            self.caption_encoder.embedding.weight[PAD_ID].zero_()
            # Near-zero bilinears start the crossing attention uniform, which
            # blurs every fused feature toward the video mean and leaves the
            # anchor scores flat for most of training. Wider init on the
            # attention maps and classifier weights breaks that plateau; the
            # zeroed bias keeps initial anchor preferences input-driven.
            self.localizer.caption_bilinear.mul_(16.0)
            self.localizer.video_bilinear.mul_(16.0)
            self.localizer.anchor_classifier.weight.mul_(8.0)
            self.localizer.anchor_classifier.bias.zero_()

    # -- encoding ----------------------------------------------------------

    def encode_video(self, features: torch.Tensor, lengths: torch.Tensor) -> EncodedSequence:
        return self.video_encoder(features, lengths)

    def encode_caption(
        self, tokens: torch.Tensor, lengths: torch.Tensor | None = None
    ) -> EncodedSequence:
        if lengths is None:
            lengths = token_lengths(tokens)
        return self.caption_encoder(tokens, lengths)

    # -- localization ------------------------------------------------------

    def localize_encoded(self, venc: EncodedSequence, cenc: EncodedSequence) -> Localization:
        segments, logits, delta = localize(venc, cenc, self.localizer, self.anchors)
        return Localization(segments=segments, anchor_logits=logits, delta=delta)

    def localize_sentence(
        self,
        features: torch.Tensor,
        feature_lengths: torch.Tensor,
        tokens: torch.Tensor,
        lengths: torch.Tensor | None = None,
    ) -> Localization:
        venc = self.encode_video(features, feature_lengths)
        cenc = self.encode_caption(tokens, lengths)
        return self.localize_encoded(venc, cenc)

    # -- captioning --------------------------------------------------------

    def decoder_state(
        self,
        features: torch.Tensor,
        lengths: torch.Tensor,
        venc: EncodedSequence,
        segments: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Pooled raw-feature context plus the boundary hidden; also returns
        the degenerate-mask fallback flags."""
        context, fallback = masked_pool(features, lengths, segments, self.mask)
        idx = boundary_hidden_index(segments, lengths)
        rows = torch.arange(features.shape[0], device=features.device)
        if segments.ndim == 2:
            init_hidden = venc.hiddens[rows, idx]
        else:
            init_hidden = venc.hiddens[rows.unsqueeze(1), idx]
        return context, init_hidden, fallback

    def caption_logits(
        self,
        features: torch.Tensor,
        lengths: torch.Tensor,
        venc: EncodedSequence,
        segments: torch.Tensor,
        tokens: torch.Tensor,
    ) -> torch.Tensor:
        """Teacher-forced next-token logits, (B, L-1, V)."""
        context, init_hidden, _ = self.decoder_state(features, lengths, venc, segments)
        return self.decoder.teacher_forced(context, init_hidden, tokens)

    def greedy_caption(
        self,
        features: torch.Tensor,
        lengths: torch.Tensor,
        segments: torch.Tensor,
        venc: EncodedSequence | None = None,
    ) -> torch.Tensor:
        if venc is None:
            venc = self.encode_video(features, lengths)
        context, init_hidden, _ = self.decoder_state(features, lengths, venc, segments)
        return self.decoder.generate(context, init_hidden)

    def sampled_caption(
        self,
        features: torch.Tensor,
        lengths: torch.Tensor,
        segments: torch.Tensor,
        temperature: float,
        generator: torch.Generator,
        venc: EncodedSequence | None = None,
    ) -> torch.Tensor:
        if venc is None:
            venc = self.encode_video(features, lengths)
        context, init_hidden, _ = self.decoder_state(features, lengths, venc, segments)
        return self.decoder.generate(
            context, init_hidden, temperature=temperature, generator=generator
        )

    def caption_log_likelihood(
        self,
        features: torch.Tensor,
        lengths: torch.Tensor,
        venc: EncodedSequence,
        segments: torch.Tensor,
        tokens: torch.Tensor,
    ) -> torch.Tensor:
        """Mean per-token log-likelihood of `tokens` under each segment.

        segments is (B, N, 2); the result is (B, N). Used to rank candidate
        segments by how well the fixed caption fits them.
        """
        batch, num = segments.shape[0], segments.shape[1]
        context, init_hidden, _ = self.decoder_state(features, lengths, venc, segments)
        flat_context = context.reshape(batch * num, -1)
        flat_hidden = init_hidden.reshape(batch * num, -1)
        flat_tokens = tokens.repeat_interleave(num, dim=0)
        logits = self.decoder.teacher_forced(flat_context, flat_hidden, flat_tokens)
        logp = torch.log_softmax(logits, dim=-1)
        targets = flat_tokens[:, 1:]
        picked = logp.gather(-1, targets.clamp_min(0).unsqueeze(-1)).squeeze(-1)
        valid = (targets != PAD_ID).to(picked.dtype)
        per_row = (picked * valid).sum(dim=1) / valid.sum(dim=1).clamp_min(1.0)
        return per_row.view(batch, num)
