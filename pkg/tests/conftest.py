"""Shared fixtures: a synthetic order-2 Markov corpus and models trained on it.

The expensive fixtures are session-scoped; every test that needs a trained
model reuses the same run, which also serves the acceptance criteria.
"""

from __future__ import annotations

import numpy as np
import pytest

import multitok as mt

MARKOV_V = 8
MARKOV_SEED = 123
SEQ_LEN = 64
N_SEQS = 300


def make_markov_chain(vocab_size: int = MARKOV_V, seed: int = MARKOV_SEED) -> np.ndarray:
    """Order-2 transition tensor P(c | a, b), rows concentrated on few symbols."""
    rng = np.random.default_rng(seed)
    return rng.dirichlet(np.full(vocab_size, 0.12), size=(vocab_size, vocab_size))


def sample_markov_corpus(trans: np.ndarray, n_seqs: int, seq_len: int, seed: int) -> list:
    V = trans.shape[0]
    rng = np.random.default_rng(seed)
    seqs = []
    for _ in range(n_seqs):
        out = [int(rng.integers(V)), int(rng.integers(V))]
        for _ in range(seq_len - 2):
            out.append(int(rng.choice(V, p=trans[out[-2], out[-1]])))
        seqs.append(np.array(out, dtype=np.int64))
    return seqs


def stationary_pair_distribution(trans: np.ndarray, iters: int = 500) -> np.ndarray:
    """Stationary distribution over (a, b) pairs by power iteration."""
    V = trans.shape[0]
    pair = np.full((V, V), 1.0 / V**2)
    for _ in range(iters):
        # next[b, c] = sum_a pair[a, b] * trans[a, b, c]
        nxt = np.einsum("ab,abc->bc", pair, trans)
        pair = nxt / nxt.sum()
    return pair


@pytest.fixture(scope="session")
def markov_chain():
    return make_markov_chain()


@pytest.fixture(scope="session")
def markov_split(markov_chain):
    seqs = sample_markov_corpus(markov_chain, N_SEQS, SEQ_LEN, seed=7)
    return mt.split_corpus(seqs, 0.9, seed=0)


@pytest.fixture(scope="session")
def markov_masks(markov_split):
    uni = mt.count_ngrams(markov_split, 1, MARKOV_V)
    return {
        n: mt.build_mask(uni, mt.count_ngrams(markov_split, n, MARKOV_V), floor=0.5)
        for n in (2, 3)
    }


@pytest.fixture(scope="session")
def trained_model(markov_split):
    """Three-head model trained for a few minutes-equivalent on the corpus."""
    cfg = mt.ModelConfig(
        vocab_size=MARKOV_V, dim=32, stem_layers=1, n_heads=3, context_len=SEQ_LEN, attn_heads=2
    )
    model = mt.MultiHeadModel(cfg, seed=0)
    tcfg = mt.TrainingConfig(
        lr_b=3e-3, lr_m=1e-2, lr_mb=3e-4, steps=250, batch_size=16, seed=0, eval_every=0
    )
    report = mt.train(model, markov_split, tcfg)
    model.training_report = report
    return model


@pytest.fixture(scope="session")
def base_model(markov_split):
    """Single-head base used by the weight-transfer tests."""
    cfg = mt.ModelConfig(
        vocab_size=MARKOV_V, dim=32, stem_layers=1, n_heads=1, context_len=SEQ_LEN, attn_heads=2
    )
    model = mt.MultiHeadModel(cfg, seed=3)
    tcfg = mt.TrainingConfig(
        lr_b=3e-3, lr_m=1e-2, lr_mb=3e-4, steps=60, batch_size=16, seed=3, eval_every=0
    )
    mt.train(model, markov_split, tcfg)
    return model


@pytest.fixture()
def tiny_model():
    cfg = mt.ModelConfig(vocab_size=16, dim=16, stem_layers=1, n_heads=3, context_len=32, attn_heads=2)
    return mt.MultiHeadModel(cfg, seed=1)
