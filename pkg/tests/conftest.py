"""Shared corpus and model builders for the heavier test modules."""

from dataclasses import dataclass

import pytest

# Filled by test_acceptance; echoed after the run so the lines survive
# pytest's output capture.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.line(line)

from vqgen.data import (
    CATEGORY_NAMES,
    FeatureStore,
    RawSample,
    Sample,
    encode_samples,
    make_synthetic,
)
from vqgen.model import ModelConfig, VqgModel
from vqgen.text import Vocabulary, build_vocab


@dataclass
class Corpus:
    store: FeatureStore
    raw: list[RawSample]
    samples: list[Sample]
    vocab: Vocabulary

    def model_config(self, **overrides) -> ModelConfig:
        base = dict(
            vocab_size=len(self.vocab),
            variant="image-ans-cat",
            n_layers=1,
            n_heads=2,
            d_model=32,
            d_ff=32,
            image_source="conv",
        )
        base.update(overrides)
        return ModelConfig(**base)

    def model(self, seed: int = 5, **overrides) -> VqgModel:
        return VqgModel(self.model_config(**overrides), self.vocab, seed=seed)


def build_corpus(n_images: int, n_categories: int = 4, seed: int = 11) -> Corpus:
    store, raw = make_synthetic(n_images, n_categories, seed=seed)
    vocab = build_vocab(
        [r.question for r in raw] + [r.answer for r in raw], atomic_tokens=CATEGORY_NAMES
    )
    return Corpus(store=store, raw=raw, samples=encode_samples(raw, vocab), vocab=vocab)


@pytest.fixture(scope="session")
def tiny_corpus() -> Corpus:
    """8 images x 4 categories = 32 samples; shared read-only."""
    return build_corpus(8)


@pytest.fixture(scope="session")
def trained(tiny_corpus):
    """Overfit guided model; regenerates its training questions."""
    from vqgen.training import TrainConfig, train

    model = tiny_corpus.model(
        seed=1, variant="image-cat", n_layers=2, n_heads=2, d_model=64, d_ff=64
    )
    cfg = TrainConfig(steps=700, batch_size=8, lr=0.003, seed=0)
    train(model, tiny_corpus.samples, tiny_corpus.store, cfg)
    return model
