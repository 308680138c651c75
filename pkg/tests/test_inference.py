import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from cyclecap.config import InferConfig
from cyclecap.data import EOS_ID
from cyclecap.inference import (ProposalDiagnostics, VideoPrediction,
                                contraction_probe, dense_caption,
                                filter_and_dedup, infer_corpus,
                                localization_to_json, localize_corpus,
                                predictions_to_json, refine_segments,
                                sample_random_segments)
from cyclecap.segments import TemporalSegment


def seg(center, width):
    return TemporalSegment(center, width)


# -- proposal sampling -------------------------------------------------------


def test_random_segments_respect_ranges():
    gen = torch.Generator().manual_seed(0)
    segments = sample_random_segments(500, gen, min_width=0.05)
    assert segments.shape == (500, 2)
    assert torch.all((segments[:, 0] >= 0) & (segments[:, 0] <= 1))
    assert torch.all((segments[:, 1] >= 0.05) & (segments[:, 1] <= 1))


def test_random_segments_deterministic_per_seed():
    a = sample_random_segments(8, torch.Generator().manual_seed(3))
    b = sample_random_segments(8, torch.Generator().manual_seed(3))
    c = sample_random_segments(8, torch.Generator().manual_seed(4))
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_random_segments_reject_zero_count():
    with pytest.raises(ValueError):
        sample_random_segments(0, torch.Generator())


# -- refinement --------------------------------------------------------------


def test_zero_rounds_is_identity(tiny_model):
    features = torch.randn(3, 12, tiny_model.feature_dim)
    lengths = torch.full((3,), 12, dtype=torch.long)
    segments = torch.tensor([[0.3, 0.2], [0.5, 0.4], [0.7, 0.3]])
    refined, empty = refine_segments(tiny_model, features, lengths, segments, rounds=0)
    assert torch.equal(refined, segments)
    assert not empty.any()


def test_refine_rejects_negative_rounds(tiny_model):
    features = torch.randn(1, 12, tiny_model.feature_dim)
    with pytest.raises(ValueError):
        refine_segments(tiny_model, features, torch.tensor([12]),
                        torch.tensor([[0.5, 0.5]]), rounds=-1)


def test_refined_segments_come_from_localizer(tiny_model):
    features = torch.randn(2, 12, tiny_model.feature_dim)
    lengths = torch.full((2,), 12, dtype=torch.long)
    segments = torch.tensor([[0.3, 0.2], [0.7, 0.3]])
    refined, empty = refine_segments(tiny_model, features, lengths, segments, rounds=1)
    with torch.no_grad():
        venc = tiny_model.encode_video(features, lengths)
        tokens = tiny_model.greedy_caption(features, lengths, segments, venc=venc)
        loc = tiny_model.localize_encoded(venc, tiny_model.encode_caption(tokens))
    assert torch.all(empty == False)  # noqa: E712
    assert torch.allclose(refined, loc.segments, atol=1e-6)


def test_empty_caption_rows_keep_their_segment(tiny_model):
    features = torch.randn(2, 12, tiny_model.feature_dim)
    lengths = torch.full((2,), 12, dtype=torch.long)
    segments = torch.tensor([[0.3, 0.2], [0.7, 0.3]])
    with torch.no_grad():
        original = tiny_model.decoder.output_proj.bias.clone()
        tiny_model.decoder.output_proj.bias[EOS_ID] = 50.0  # decode stops at once
    try:
        refined, empty = refine_segments(
            tiny_model, features, lengths, segments, rounds=1
        )
        assert empty.all()
        assert torch.equal(refined, segments)
    finally:
        with torch.no_grad():
            tiny_model.decoder.output_proj.bias.copy_(original)


def test_two_rounds_compose_single_rounds(tiny_model):
    features = torch.randn(2, 12, tiny_model.feature_dim)
    lengths = torch.full((2,), 12, dtype=torch.long)
    segments = torch.tensor([[0.4, 0.3], [0.6, 0.2]])
    twice, _ = refine_segments(tiny_model, features, lengths, segments, rounds=2)
    once, _ = refine_segments(tiny_model, features, lengths, segments, rounds=1)
    again, _ = refine_segments(tiny_model, features, lengths, once, rounds=1)
    assert torch.allclose(twice, again, atol=1e-6)


# -- filtering ---------------------------------------------------------------


def test_filter_keeps_self_consistent_proposals():
    initials = [seg(0.5, 0.4), seg(0.2, 0.2)]
    refineds = [seg(0.5, 0.4), seg(0.8, 0.2)]
    kept, self_ious = filter_and_dedup(initials, refineds, keep_iou=0.5, merge_iou=0.7)
    assert kept == [0]
    assert self_ious[0] == pytest.approx(1.0)
    assert self_ious[1] == pytest.approx(0.0)


def test_dedup_drops_overlapping_survivors():
    initials = [seg(0.5, 0.4), seg(0.52, 0.4), seg(0.2, 0.1)]
    refineds = [seg(0.5, 0.4), seg(0.52, 0.4), seg(0.2, 0.1)]
    kept, _ = filter_and_dedup(initials, refineds, keep_iou=0.5, merge_iou=0.7)
    assert 0 in kept and 2 in kept
    assert 1 not in kept  # overlaps the first at > 0.7 tIoU


def test_dedup_visits_by_descending_self_iou():
    initials = [seg(0.5, 0.38), seg(0.52, 0.4)]
    refineds = [seg(0.5, 0.4), seg(0.52, 0.4)]
    kept, self_ious = filter_and_dedup(initials, refineds, keep_iou=0.5, merge_iou=0.7)
    assert kept == [1]  # exact self-match wins the overlap
    assert self_ious[1] > self_ious[0]


def test_filter_rejects_mismatched_lengths():
    with pytest.raises(ValueError):
        filter_and_dedup([seg(0.5, 0.4)], [], keep_iou=0.5, merge_iou=0.7)


def test_filter_can_reject_everything():
    kept, _ = filter_and_dedup(
        [seg(0.2, 0.1)], [seg(0.8, 0.1)], keep_iou=0.5, merge_iou=0.7
    )
    assert kept == []


@given(st.integers(0, 10 ** 6))
def test_kept_refined_segments_are_mutually_disjoint_at_merge_iou(seed):
    gen = torch.Generator().manual_seed(seed)
    values = torch.rand(10, 2, generator=gen)
    initials = [seg(float(m), 0.1 + 0.8 * float(w)) for m, w in values]
    shifted = torch.rand(10, 2, generator=gen)
    refineds = [seg(float(m), 0.1 + 0.8 * float(w)) for m, w in shifted]
    kept, _ = filter_and_dedup(initials, refineds, keep_iou=0.2, merge_iou=0.6)
    from cyclecap.metrics import tiou_segments
    for i, a in enumerate(kept):
        for b in kept[i + 1:]:
            assert tiou_segments(refineds[a], refineds[b]) < 0.6


# -- contraction probe -------------------------------------------------------


def test_contraction_probe_returns_finite_ratios(tiny_model):
    features = torch.randn(1, 12, tiny_model.feature_dim)
    lengths = torch.tensor([12])
    segments = torch.tensor([[0.5, 0.3], [0.3, 0.2]])
    ratios = contraction_probe(
        tiny_model, features, lengths, segments,
        torch.Generator().manual_seed(0),
    )
    assert len(ratios) <= 2
    for ratio in ratios:
        assert ratio >= 0.0


# -- per-video pipeline ------------------------------------------------------


def test_dense_caption_is_deterministic(tiny_corpus, tiny_model):
    entry = tiny_corpus.entries[0]
    cfg = InferConfig(num_proposals=6, seed=4)
    a = dense_caption(tiny_model, tiny_corpus.vocab, entry, cfg)
    b = dense_caption(tiny_model, tiny_corpus.vocab, entry, cfg)
    assert a.video_id == entry.video_id
    assert [e.sentence for e in a.events] == [e.sentence for e in b.events]
    assert [e.timestamp for e in a.events] == [e.timestamp for e in b.events]


def test_dense_caption_varies_with_seed(tiny_corpus, tiny_model):
    entry = tiny_corpus.entries[0]
    a = dense_caption(tiny_model, tiny_corpus.vocab, entry,
                      InferConfig(num_proposals=6, seed=4), diagnostics=True)
    b = dense_caption(tiny_model, tiny_corpus.vocab, entry,
                      InferConfig(num_proposals=6, seed=5), diagnostics=True)
    assert [p.initial for p in a.proposals] != [p.initial for p in b.proposals]


def test_dense_caption_caps_events_at_num_proposals(tiny_corpus, tiny_model):
    entry = tiny_corpus.entries[0]
    cfg = InferConfig(num_proposals=5, seed=0, keep_iou=0.0, merge_iou=1.1)
    prediction = dense_caption(tiny_model, tiny_corpus.vocab, entry, cfg)
    assert len(prediction.proposals) == 5
    assert prediction.contraction_ratios == []  # diagnostics off
    assert len(prediction.events) <= 5


def test_dense_caption_timestamps_lie_in_video(tiny_corpus, tiny_model):
    entry = tiny_corpus.entries[0]
    cfg = InferConfig(num_proposals=8, seed=1, keep_iou=0.0)
    prediction = dense_caption(tiny_model, tiny_corpus.vocab, entry, cfg)
    duration = entry.features.duration_seconds
    for event in prediction.events:
        lo, hi = event.timestamp
        assert 0.0 <= lo < hi <= duration


def test_dense_caption_diagnostics_records_all_proposals(tiny_corpus, tiny_model):
    entry = tiny_corpus.entries[0]
    cfg = InferConfig(num_proposals=7, seed=2)
    prediction = dense_caption(tiny_model, tiny_corpus.vocab, entry, cfg,
                               diagnostics=True)
    assert len(prediction.proposals) == 7
    for p in prediction.proposals:
        assert 0.0 <= p.self_iou <= 1.0


def test_infer_corpus_covers_every_video(tiny_corpus, tiny_model):
    cfg = InferConfig(num_proposals=4, seed=0)
    results = infer_corpus(tiny_model, tiny_corpus.vocab, tiny_corpus, cfg)
    assert set(results) == {e.video_id for e in tiny_corpus.entries}


def test_localize_corpus_aligns_with_captions(tiny_corpus, tiny_model):
    results = localize_corpus(tiny_model, tiny_corpus)
    for entry in tiny_corpus.entries:
        spans = results[entry.video_id]
        assert len(spans) == len(entry.captions)
        for lo, hi in spans:
            assert 0.0 <= lo < hi <= entry.features.duration_seconds


# -- JSON --------------------------------------------------------------------


def sample_results():
    return {
        "vidB": VideoPrediction(
            video_id="vidB",
            events=[],
            proposals=[
                ProposalDiagnostics(
                    initial=seg(0.5, 0.4), refined=seg(0.8, 0.2),
                    self_iou=0.0, empty_caption=False,
                )
            ],
        ),
        "vidA": VideoPrediction(
            video_id="vidA",
            events=[
                __import__("cyclecap.inference", fromlist=["EmittedEvent"]).EmittedEvent(
                    sentence="agent0 motion0", timestamp=(3.0, 9.0), self_iou=0.75
                )
            ],
        ),
    }


def test_predictions_json_shape_and_order():
    out = predictions_to_json(sample_results())
    assert list(out) == ["results"]
    assert list(out["results"]) == ["vidA", "vidB"]
    event = out["results"]["vidA"][0]
    assert event == {
        "sentence": "agent0 motion0",
        "timestamp": [3.0, 9.0],
        "self_iou": 0.75,
    }
    assert out["results"]["vidB"] == []


def test_predictions_json_diagnostics_block():
    out = predictions_to_json(sample_results(), diagnostics=True)
    diag = out["diagnostics"]["vidB"]
    assert diag["all_filtered"] is True
    assert diag["proposals"][0]["initial"] == [0.5, 0.4]
    assert diag["proposals"][0]["refined"] == [0.8, 0.2]
    assert diag["proposals"][0]["empty_caption"] is False


def test_localization_json_sorted_by_video():
    out = localization_to_json({"b": [(0.0, 2.0)], "a": [(1.0, 3.0), (4.0, 6.0)]})
    assert list(out["localization"]) == ["a", "b"]
    assert out["localization"]["a"] == [[1.0, 3.0], [4.0, 6.0]]
