import pytest
import torch
from hypothesis import HealthCheck, settings

from cyclecap.data import SynthSpec, generate_synthetic_corpus
from cyclecap.model import CycleModel

settings.register_profile(
    "default",
    deadline=None,
    max_examples=50,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_corpus():
    spec = SynthSpec(
        num_videos=8, steps=32, feature_dim=8, num_event_types=3, seed=11
    )
    return generate_synthetic_corpus(spec)


@pytest.fixture
def tiny_model(tiny_corpus):
    return CycleModel(
        vocab_size=len(tiny_corpus.vocab),
        feature_dim=8,
        hidden_dim=32,
        anchor_scales=(1.0, 0.5, 0.25),
        init_seed=3,
    )
