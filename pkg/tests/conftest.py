"""Shared builders for small model instances and corpora."""

import numpy as np
import pytest

from phenotopics.corpus import Corpus, RecordBags, Vocabulary
from phenotopics.variational import ModelParams


def make_params(mu0, sigma0, betas):
    """ModelParams from dense probability rows (one matrix per type)."""
    return ModelParams.create(
        np.asarray(mu0, dtype=float),
        np.asarray(sigma0, dtype=float),
        [np.log(np.asarray(b, dtype=float)) for b in betas],
    )


def random_params(rng, k, vocab_sizes, concentration=0.5):
    root = rng.normal(size=(k, k)) / np.sqrt(k)
    sigma0 = root @ root.T + np.eye(k) * 0.5
    mu0 = rng.normal(size=k) * 0.5
    betas = [rng.dirichlet(np.full(v, concentration), size=k) for v in vocab_sizes]
    return make_params(mu0, sigma0, betas)


def random_record(rng, params, n_tokens_per_type, record_id="r0"):
    bags = []
    for lb, n in zip(params.log_beta, n_tokens_per_type):
        v = lb.shape[1]
        bag = {}
        for x in rng.integers(0, v, size=n):
            bag[int(x)] = bag.get(int(x), 0) + 1
        bags.append(bag)
    return RecordBags(record_id=record_id, bags=tuple(bags))


def two_block_corpus(per_population=6, tokens_per_record=12):
    """Two disjoint token populations: records use either tokens 0-2 or 3-5."""
    vocab = Vocabulary("dx", tuple(f"w{i}" for i in range(6)))
    rng = np.random.default_rng(11)
    records = []
    for d in range(per_population * 2):
        block = 0 if d < per_population else 3
        bag = {}
        for x in rng.integers(block, block + 3, size=tokens_per_record):
            bag[int(x)] = bag.get(int(x), 0) + 1
        records.append(RecordBags(f"rec{d:02d}", (bag,)))
    return Corpus(vocabularies=(vocab,), records=tuple(records))


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
