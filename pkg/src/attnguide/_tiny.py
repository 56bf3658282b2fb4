"""Shared tiny-model fixture for gradient verification (selftest and tests)."""

from __future__ import annotations

import numpy as np

from .javacode import parse
from .model import GuidedModel, ModelConfig, make_batch, prepare_instances
from .patterns import PatternSpec, assign_heads
from .subtok import build_vocab, encode


def tiny_model_and_batch(seed: int = 0, alpha0: float = 1.0):
    """Two layers, two heads, d_model 8, max_len 12, one guided head."""
    units = [parse("t0", "sum = num1 + num2 ;"), parse("t1", "return sum ;")]
    vocab = build_vocab(units, 48)
    config = ModelConfig(
        num_layers=2,
        heads=2,
        d_model=8,
        ffn_dim=16,
        vocab_size=len(vocab),
        max_len=12,
        seed=seed,
    )
    assignment = assign_heads(2, 2, 0.5, [PatternSpec.syntax("Identifier")])
    model = GuidedModel(config, assignment, alpha0=alpha0)
    seqs = [encode(u, vocab, config.max_len) for u in units]
    instances = prepare_instances(units, seqs, assignment)
    batch = make_batch(instances, model, np.random.default_rng(seed), task="cloze")
    return model, batch
