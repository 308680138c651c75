"""Cycle training from captions alone.

Three stages share one SGD optimizer. Pretraining teaches the decoder to
caption whole videos from a fixed full-width segment; stage 1 adds the
localize -> caption reconstruction loss plus the segment cycle loss;
stage 2 adds anchor classification against likelihood-ranked pseudo labels.
All randomness is derived per (seed, purpose, stage, step) so interrupted
runs resume bit-exactly from epoch-boundary checkpoints.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .config import RunConfig, TrainConfig, config_hash
from .data import NUM_SPECIALS, PAD_ID, Corpus, Vocabulary, WeakSupervisionError
from .localizer import argmax_lowest
from .model import CycleModel, pad_captions, token_lengths
from .segments import MIN_WIDTH

STAGES = ("pretrain", "stage1", "stage2")
PRETRAIN_SEGMENT = (0.5, 1.0)
CHECKPOINT_VERSION = 1
LOSS_CSV_HEADER = "step,stage,L_c,L_s,L_a,total"


class TrainingDiverged(RuntimeError):
    """Loss or gradients became non-finite; the last checkpoint is kept."""

    def __init__(self, message: str, last_checkpoint: Path | None = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


def stable_seed(*parts) -> int:
    """Deterministic 63-bit seed from a tuple of hashable-ish parts."""
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


@dataclass(frozen=True)
class LossWeights:
    lambda_s: float = 0.1
    lambda_a: float = 0.1
    sigma: float = 0.05

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "LossWeights":
        return cls(lambda_s=cfg.lambda_s, lambda_a=cfg.lambda_a, sigma=cfg.sigma)


@dataclass
class StepStats:
    step: int
    stage: str
    l_c: float
    l_s: float
    l_a: float
    total: float

    def csv_row(self) -> str:
        return (
            f"{self.step},{self.stage},{self.l_c:.6f},{self.l_s:.6f},"
            f"{self.l_a:.6f},{self.total:.6f}"
        )


@dataclass
class Batch:
    features: torch.Tensor       # (B, T_max, k) zero padded
    feature_lengths: torch.Tensor
    tokens: torch.Tensor         # (B, L_max) PAD padded
    token_lengths: torch.Tensor


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def caption_loss(logits: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
    """Mean cross entropy over non-PAD target positions.

    logits (B, L-1, V) are aligned to tokens[:, 1:].
    """
    targets = tokens[:, 1:]
    if int((targets != PAD_ID).sum()) == 0:
        raise ValueError("caption loss needs at least one non-PAD target")
    return F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=PAD_ID
    )


def segment_cycle_loss(predicted: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """(m - m')^2 + (w - w')^2, averaged over the batch."""
    return ((predicted - target) ** 2).sum(dim=1).mean()


def perturb_segments(
    segments: torch.Tensor, sigma: float, generator: torch.Generator
) -> torch.Tensor:
    noise = torch.randn(segments.shape, generator=generator, dtype=segments.dtype)
    noisy = segments + sigma * noise
    return torch.stack(
        [noisy[:, 0].clamp(0.0, 1.0), noisy[:, 1].clamp(MIN_WIDTH, 1.0)], dim=1
    )


def label_best_anchor(model, batch: Batch, venc) -> torch.Tensor:
    """Pseudo anchor labels: the anchor whose segment makes the reference
    caption most likely under the current decoder. Ties pick the lowest
    index. No gradients flow."""
    with torch.no_grad():
        grid = model.anchors.as_tensor(dtype=batch.features.dtype)
        candidates = grid.unsqueeze(0).expand(batch.features.shape[0], -1, -1)
        scores = model.caption_log_likelihood(
            batch.features, batch.feature_lengths, venc, candidates, batch.tokens
        )
        return argmax_lowest(scores)


# ---------------------------------------------------------------------------
# Steps
# ---------------------------------------------------------------------------


def _optimizer_step(model, optimizer, total: torch.Tensor, clip_norm: float) -> None:
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    nn.utils.clip_grad_norm_(model.parameters(), clip_norm)
    optimizer.step()


def pretrain_step(
    model: CycleModel,
    optimizer,
    batch: Batch,
    step: int,
    clip_norm: float,
) -> StepStats:
    """Caption the whole video: fixed segment, reconstruction loss only."""
    venc = model.encode_video(batch.features, batch.feature_lengths)
    segments = torch.tensor(
        [PRETRAIN_SEGMENT], dtype=batch.features.dtype
    ).expand(batch.features.shape[0], -1)
    logits = model.caption_logits(
        batch.features, batch.feature_lengths, venc, segments, batch.tokens
    )
    l_c = caption_loss(logits, batch.tokens)
    _check_finite(l_c, step, "pretrain")
    _optimizer_step(model, optimizer, l_c, clip_norm)
    value = float(l_c.detach())
    return StepStats(step=step, stage="pretrain", l_c=value, l_s=0.0, l_a=0.0, total=value)


def cycle_step(
    model: CycleModel,
    optimizer,
    batch: Batch,
    weights: LossWeights,
    stage: str,
    step: int,
    seed: int,
    clip_norm: float,
) -> StepStats:
    """One optimization step of the full objective.

    The reconstruction loss always applies. The segment cycle loss applies
    when lambda_s != 0; anchor classification only in stage 2 with
    lambda_a != 0. Zero weights skip their terms outright so the logged
    total equals the exact sum of active terms.
    """
    venc = model.encode_video(batch.features, batch.feature_lengths)
    cenc = model.encode_caption(batch.tokens, batch.token_lengths)
    loc = model.localize_encoded(venc, cenc)
    logits = model.caption_logits(
        batch.features, batch.feature_lengths, venc, loc.segments, batch.tokens
    )
    l_c = caption_loss(logits, batch.tokens)
    total = l_c
    l_s_value = 0.0
    l_a_value = 0.0

    if weights.lambda_s != 0.0:
        target = loc.segments.detach()
        noise_gen = torch.Generator().manual_seed(stable_seed(seed, "noise", stage, step))
        noisy = perturb_segments(target, weights.sigma, noise_gen)
        with torch.no_grad():
            pseudo_tokens = model.greedy_caption(
                batch.features, batch.feature_lengths, noisy, venc=venc
            )
        relocated = model.localize_encoded(venc, model.encode_caption(pseudo_tokens))
        l_s = segment_cycle_loss(relocated.segments, target)
        total = total + weights.lambda_s * l_s
        l_s_value = float(l_s.detach())

    if stage == "stage2" and weights.lambda_a != 0.0:
        best = label_best_anchor(model, batch, venc)
        l_a = F.cross_entropy(loc.anchor_logits, best)
        total = total + weights.lambda_a * l_a
        l_a_value = float(l_a.detach())

    _check_finite(total, step, stage)
    _optimizer_step(model, optimizer, total, clip_norm)
    return StepStats(
        step=step,
        stage=stage,
        l_c=float(l_c.detach()),
        l_s=l_s_value,
        l_a=l_a_value,
        total=float(total.detach()),
    )


def _check_finite(loss: torch.Tensor, step: int, stage: str) -> None:
    if not bool(torch.isfinite(loss)):
        raise TrainingDiverged(f"non-finite loss at step {step} ({stage})")


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


def training_pairs(corpus: Corpus) -> list[tuple[int, int]]:
    """All (video index, caption index) pairs; one example per caption."""
    pairs = []
    for vi, entry in enumerate(corpus.entries):
        for ci in range(len(entry.captions)):
            pairs.append((vi, ci))
    return pairs


def make_batch(corpus: Corpus, pairs: list[tuple[int, int]], dtype=torch.float32) -> Batch:
    entries = [corpus.entries[vi] for vi, _ in pairs]
    max_steps = max(e.features.steps for e in entries)
    dim = entries[0].features.dim
    features = torch.zeros(len(entries), max_steps, dim, dtype=dtype)
    lengths = torch.zeros(len(entries), dtype=torch.long)
    for row, entry in enumerate(entries):
        steps = entry.features.steps
        features[row, :steps] = torch.from_numpy(entry.features.values)
        lengths[row] = steps
    tokens, tok_lengths = pad_captions(
        [corpus.entries[vi].captions[ci] for vi, ci in pairs]
    )
    return Batch(
        features=features,
        feature_lengths=lengths,
        tokens=tokens,
        token_lengths=tok_lengths,
    )


def epoch_order(seed: int, stage: str, epoch: int, count: int) -> list[int]:
    rng = np.random.default_rng(stable_seed(seed, "order", stage, epoch))
    return [int(i) for i in rng.permutation(count)]


# ---------------------------------------------------------------------------
# Checkpoints: u32 header length, JSON header, float32 payloads (parameters
# in registration order, then momentum buffers for parameters that have one).
# ---------------------------------------------------------------------------


@dataclass
class TrainCheckpoint:
    model: CycleModel
    vocab: Vocabulary
    header: dict
    momentum: dict[str, torch.Tensor] = field(default_factory=dict)


def save_checkpoint(
    path,
    model: CycleModel,
    vocab: Vocabulary,
    stage: str,
    step: int,
    seed: int,
    completed_epochs: dict[str, int] | None = None,
    cfg_hash: str = "",
    optimizer=None,
) -> None:
    params = list(model.named_parameters())
    momentum_names: list[str] = []
    momentum_tensors: list[torch.Tensor] = []
    if optimizer is not None:
        by_param = {id(p): name for name, p in params}
        state_by_name = {}
        for p, state in optimizer.state.items():
            buf = state.get("momentum_buffer")
            if buf is not None and id(p) in by_param:
                state_by_name[by_param[id(p)]] = buf
        for name, _ in params:
            if name in state_by_name:
                momentum_names.append(name)
                momentum_tensors.append(state_by_name[name])

    header = {
        "format_version": CHECKPOINT_VERSION,
        "stage": stage,
        "step": step,
        "seed": seed,
        "config_hash": cfg_hash,
        "completed_epochs": dict(completed_epochs or {}),
        "model": {
            "vocab_size": model.vocab_size,
            "feature_dim": model.feature_dim,
            "hidden_dim": model.hidden_dim,
            "anchor_scales": list(model.anchors.scales),
            "mask_scale": model.mask.scale,
            "max_caption_len": model.max_caption_len,
            "init_seed": model.init_seed,
        },
        "vocab": vocab.id_to_token[NUM_SPECIALS:],
        "params": [{"name": n, "shape": list(p.shape)} for n, p in params],
        "momentum": [
            {"name": n, "shape": list(t.shape)}
            for n, t in zip(momentum_names, momentum_tensors)
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, p in params:
            f.write(np.ascontiguousarray(p.detach().numpy(), dtype="<f4").tobytes())
        for t in momentum_tensors:
            f.write(np.ascontiguousarray(t.detach().numpy(), dtype="<f4").tobytes())


def _read_payload(f, shape) -> torch.Tensor:
    count = int(np.prod(shape)) if shape else 1
    raw = f.read(count * 4)
    if len(raw) != count * 4:
        raise ValueError("truncated checkpoint payload")
    values = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return torch.from_numpy(values)


def load_checkpoint(path) -> TrainCheckpoint:
    with open(path, "rb") as f:
        (header_len,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(header_len).decode("utf-8"))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
        vocab = Vocabulary(header["vocab"])
        spec = header["model"]
        if spec["vocab_size"] != len(vocab):
            raise ValueError(
                f"vocab length {len(vocab)} does not match recorded size {spec['vocab_size']}"
            )
        model = CycleModel(
            vocab_size=spec["vocab_size"],
            feature_dim=spec["feature_dim"],
            hidden_dim=spec["hidden_dim"],
            anchor_scales=tuple(spec["anchor_scales"]),
            mask_scale=spec["mask_scale"],
            max_caption_len=spec["max_caption_len"],
            init_seed=spec["init_seed"],
        )
        named = dict(model.named_parameters())
        with torch.no_grad():
            for entry in header["params"]:
                param = named.get(entry["name"])
                if param is None:
                    raise ValueError(f"checkpoint names unknown parameter {entry['name']!r}")
                if list(param.shape) != entry["shape"]:
                    raise ValueError(
                        f"shape mismatch for {entry['name']}: model {list(param.shape)} "
                        f"vs checkpoint {entry['shape']}"
                    )
                param.copy_(_read_payload(f, entry["shape"]))
        momentum = {
            entry["name"]: _read_payload(f, entry["shape"]) for entry in header["momentum"]
        }
    return TrainCheckpoint(model=model, vocab=vocab, header=header, momentum=momentum)


def attach_momentum(optimizer, model: CycleModel, checkpoint: TrainCheckpoint) -> None:
    """Restore SGD momentum buffers by parameter name."""
    named = dict(model.named_parameters())
    for name, buf in checkpoint.momentum.items():
        optimizer.state[named[name]] = {"momentum_buffer": buf.clone()}


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    steps: int
    checkpoints: dict[str, Path]
    final_checkpoint: Path
    loss_csv: Path


def _stage_plan(cfg: TrainConfig) -> list[tuple[str, int]]:
    return [
        ("pretrain", cfg.pretrain_epochs),
        ("stage1", cfg.stage1_epochs),
        ("stage2", cfg.stage2_epochs),
    ]


def train_model(
    corpus: Corpus,
    run_cfg: RunConfig,
    out_dir,
    resume_from=None,
    progress=None,
) -> TrainResult:
    """Run all stages over a weak-mode corpus, logging one CSV row per step
    and checkpointing at every epoch boundary.

    `resume_from` restores an epoch-boundary checkpoint (parameters and
    momentum) and skips the epochs it records, reproducing the remaining
    steps of an uninterrupted run exactly.
    """
    if corpus.mode != "weak":
        raise WeakSupervisionError("training requires a weak-mode corpus")
    if corpus.vocab is None:
        raise ValueError("corpus has no vocabulary attached")
    if not corpus.entries:
        raise ValueError("corpus is empty")
    dims = {entry.features.dim for entry in corpus.entries}
    if len(dims) != 1:
        raise ValueError(f"inconsistent feature dims in corpus: {sorted(dims)}")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = run_cfg.train
    weights = LossWeights.from_config(cfg)
    cfg_hash = config_hash(run_cfg)
    vocab = corpus.vocab

    completed = {stage: 0 for stage in STAGES}
    step = 0
    if resume_from is not None:
        bundle = load_checkpoint(resume_from)
        model = bundle.model
        completed.update(bundle.header.get("completed_epochs", {}))
        step = int(bundle.header.get("step", 0))
    else:
        model = CycleModel.from_config(
            run_cfg.model,
            vocab_size=len(vocab),
            feature_dim=dims.pop(),
            max_caption_len=run_cfg.data.max_caption_len,
        )
    optimizer = torch.optim.SGD(
        model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum
    )
    if resume_from is not None:
        attach_momentum(optimizer, model, bundle)

    pairs = training_pairs(corpus)
    if not pairs:
        raise ValueError("corpus has no captions to train on")

    loss_csv = out_dir / "losses.csv"
    checkpoints: dict[str, Path] = {}
    latest = out_dir / "latest.ckpt"
    csv_mode = "a" if resume_from is not None and loss_csv.exists() else "w"

    def save(path: Path, stage: str) -> None:
        save_checkpoint(
            path,
            model,
            vocab,
            stage=stage,
            step=step,
            seed=cfg.seed,
            completed_epochs=completed,
            cfg_hash=cfg_hash,
            optimizer=optimizer,
        )

    with open(loss_csv, csv_mode, encoding="utf-8") as csv:
        if csv_mode == "w":
            csv.write(LOSS_CSV_HEADER + "\n")
        for stage, epochs in _stage_plan(cfg):
            for epoch in range(completed[stage], epochs):
                order = epoch_order(cfg.seed, stage, epoch, len(pairs))
                for start in range(0, len(order), cfg.batch_size):
                    chunk = [pairs[i] for i in order[start : start + cfg.batch_size]]
                    batch = make_batch(corpus, chunk)
                    try:
                        if stage == "pretrain":
                            stats = pretrain_step(
                                model, optimizer, batch, step, cfg.clip_norm
                            )
                        else:
                            stats = cycle_step(
                                model, optimizer, batch, weights, stage, step,
                                cfg.seed, cfg.clip_norm,
                            )
                    except TrainingDiverged as exc:
                        exc.last_checkpoint = latest if latest.exists() else None
                        raise
                    csv.write(stats.csv_row() + "\n")
                    step += 1
                    if progress is not None:
                        progress(stats)
                completed[stage] = epoch + 1
                csv.flush()
                save(latest, stage)
            stage_path = out_dir / f"{stage}.ckpt"
            save(stage_path, stage)
            checkpoints[stage] = stage_path

    final = out_dir / "final.ckpt"
    save(final, STAGES[-1])
    return TrainResult(
        steps=step, checkpoints=checkpoints, final_checkpoint=final, loss_csv=loss_csv
    )
