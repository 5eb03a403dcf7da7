"""Training loop, MLP head, evaluation, search, and model serialization."""

import json

import numpy as np
import pytest

from sopa.autodiff import Adam, Param
from sopa.automata import (PatternParams, PatternSetConfig, group_params,
                           group_patterns, make_patterns)
from sopa.classifier import (MlpParams, ModelBundle, TrainConfig,
                             TrainingDiverged, atomic_write_text,
                             count_parameters, evaluate, forward_logits,
                             load_model, mlp_probabilities, random_search,
                             save_model, softmax, train)
from sopa.embeddings import EmbeddingMatrix, TokenizedDocument, Vocabulary

from _synth import micro_task


QUICK = TrainConfig(pattern_spec={2: 2}, mlp_hidden=4, batch_size=8,
                    max_epochs=3, patience=5, lr=1e-2, seed=1)


def zero_model(num_patterns=2, hidden=3, num_classes=2, vocab=None):
    patterns = [PatternParams(u=np.zeros((2, 2)), a=np.zeros(2),
                              w=np.zeros((2, 2)), b=np.zeros(2), c=np.zeros(2))
                for _ in range(num_patterns)]
    mlp = MlpParams(w1=np.zeros((num_patterns, hidden)), b1=np.zeros(hidden),
                    w2=np.zeros((hidden, num_classes)), b2=np.zeros(num_classes))
    fingerprint = vocab.fingerprint() if vocab else {"sha256": "x", "dim": 2}
    return ModelBundle(patterns=patterns, mlp=mlp,
                       config=PatternSetConfig(pattern_spec={2: num_patterns}),
                       vocab_fingerprint=fingerprint, num_classes=num_classes)


# -- MLP head --------------------------------------------------------------

def test_softmax_rows_sum_to_one(rng):
    p = softmax(rng.normal(size=(5, 4)))
    assert np.allclose(p.sum(axis=1), 1.0)
    assert (p > 0).all()


def test_softmax_shift_invariant(rng):
    x = rng.normal(size=(3, 4))
    assert np.allclose(softmax(x), softmax(x + 100.0), atol=1e-12)


def test_softmax_uniform_on_constant_logits():
    p = softmax(np.array([7.0, 7.0, 7.0]))
    assert (p == p[0]).all()
    assert p.sum() == pytest.approx(1.0)


def test_mlp_probabilities_zero_weights_uniform():
    mlp = MlpParams(w1=np.zeros((2, 3)), b1=np.zeros(3),
                    w2=np.zeros((3, 4)), b2=np.zeros(4))
    p = mlp_probabilities(mlp, np.array([[1.0, 2.0], [0.0, 0.0]]))
    assert p.shape == (2, 4)
    assert (p == 0.25).all()


def test_mlp_params_shape_validation():
    with pytest.raises(ValueError, match="inconsistent"):
        MlpParams(w1=np.zeros((2, 3)), b1=np.zeros(4),
                  w2=np.zeros((3, 2)), b2=np.zeros(2))
    with pytest.raises(ValueError, match="inconsistent"):
        MlpParams(w1=np.zeros((2, 3)), b1=np.zeros(3),
                  w2=np.zeros((4, 2)), b2=np.zeros(2))


def test_forward_logits_matches_batch_head():
    vocab, emb, train_docs, _ = micro_task()
    model = zero_model(vocab=vocab)
    p = forward_logits(model, train_docs[0], vocab, emb)
    assert p.shape == (2,)
    assert (p == 0.5).all()


def test_forward_logits_dropout_needs_rng():
    vocab, emb, train_docs, _ = micro_task()
    model = zero_model(vocab=vocab)
    with pytest.raises(ValueError, match="needs a random generator"):
        forward_logits(model, train_docs[0], vocab, emb, train_mode=True,
                       dropout=0.5)
    # inference mode ignores the dropout rate entirely
    p = forward_logits(model, train_docs[0], vocab, emb, dropout=0.5)
    assert (p == 0.5).all()


# -- evaluation ------------------------------------------------------------

def test_evaluate_ties_resolve_to_class_zero():
    vocab, emb, train_docs, _ = micro_task()
    model = zero_model(vocab=vocab)
    metrics = evaluate(model, train_docs, vocab, emb)
    zeros = sum(1 for d in train_docs if d.label == 0)
    assert metrics["correct"] == zeros
    assert metrics["accuracy"] == zeros / len(train_docs)
    assert metrics["total"] == len(train_docs)
    assert metrics["per_class"][0] == {"total": zeros, "correct": zeros}
    assert metrics["per_class"][1]["correct"] == 0


def test_evaluate_rejects_empty_and_unlabeled():
    vocab, emb, train_docs, _ = micro_task()
    model = zero_model(vocab=vocab)
    with pytest.raises(ValueError, match="empty evaluation dataset"):
        evaluate(model, [], vocab, emb)
    bare = TokenizedDocument(token_ids=[0], raw_tokens=["pos"], doc_id=7)
    with pytest.raises(ValueError, match="has no label"):
        evaluate(model, [bare], vocab, emb)


def test_fingerprint_mismatch_rejected():
    vocab, emb, train_docs, _ = micro_task()
    model = zero_model(vocab=vocab)
    other = Vocabulary(words=["different"], dim=2)
    with pytest.raises(ValueError, match="vocabulary fingerprint"):
        evaluate(model, train_docs, other, emb)
    with pytest.raises(ValueError, match="vocabulary fingerprint"):
        forward_logits(model, train_docs[0], other, emb)


# -- parameter accounting ---------------------------------------------------

def test_count_parameters_formula():
    patterns = [PatternParams(u=np.zeros((5, 300)), a=np.zeros(5),
                              w=np.zeros((5, 300)), b=np.zeros(5), c=np.zeros(5))
                for _ in range(10)]
    mlp = MlpParams(w1=np.zeros((10, 25)), b1=np.zeros(25),
                    w2=np.zeros((25, 2)), b2=np.zeros(2))
    model = ModelBundle(patterns=patterns, mlp=mlp,
                        config=PatternSetConfig(pattern_spec={5: 10}),
                        vocab_fingerprint={}, num_classes=2)
    sopa_count, mlp_count = count_parameters(model)
    assert sopa_count == 30150  # (2*300 + 3) * 5 * 10
    assert mlp_count == 11 * 25 + 26 * 2


def test_count_parameters_matches_optimizer_registration():
    config = PatternSetConfig(pattern_spec={2: 2, 1: 1})
    rng = np.random.default_rng(0)
    patterns = make_patterns(config, 2, rng)
    groups = group_patterns(patterns, as_params=True)
    mlp = MlpParams.random(3, 4, 2, rng)
    params = group_params(groups) + [Param(f"mlp.{n}", getattr(mlp, n))
                                     for n in ("w1", "b1", "w2", "b2")]
    optimizer = Adam(params, lr=1e-3)
    model = ModelBundle(patterns=patterns, mlp=mlp, config=config,
                        vocab_fingerprint={}, num_classes=2)
    sopa_count, mlp_count = count_parameters(model)
    assert optimizer.registered_scalars == sopa_count + mlp_count
    assert sopa_count == (2 * 2 + 3) * 2 * 2 + (2 * 2 + 3) * 1


# -- training --------------------------------------------------------------

def test_train_smoke_and_log_structure():
    vocab, emb, train_docs, dev_docs = micro_task()
    model, log = train(train_docs, dev_docs, vocab, emb, QUICK)
    assert model.num_patterns == 2
    assert model.num_classes == 2
    assert model.vocab_fingerprint == vocab.fingerprint()
    assert 1 <= len(log) <= QUICK.max_epochs
    for i, rec in enumerate(log, start=1):
        assert rec["epoch"] == i
        assert set(rec) == {"epoch", "train_loss", "dev_loss", "dev_acc"}
        assert np.isfinite(rec["train_loss"]) and np.isfinite(rec["dev_loss"])
        assert 0.0 <= rec["dev_acc"] <= 1.0


def test_train_fixed_seed_is_bit_identical():
    vocab, emb, train_docs, dev_docs = micro_task()
    m1, log1 = train(train_docs, dev_docs, vocab, emb, QUICK)
    m2, log2 = train(train_docs, dev_docs, vocab, emb, QUICK)
    assert log1 == log2
    for p1, p2 in zip(m1.patterns, m2.patterns):
        for name in ("u", "a", "w", "b", "c"):
            assert np.array_equal(getattr(p1, name), getattr(p2, name))
    for name in ("w1", "b1", "w2", "b2"):
        assert np.array_equal(getattr(m1.mlp, name), getattr(m2.mlp, name))


def test_zero_lr_stops_after_patience():
    vocab, emb, train_docs, dev_docs = micro_task()
    config = TrainConfig(pattern_spec={1: 1}, mlp_hidden=2, batch_size=8,
                         max_epochs=10, patience=1, lr=0.0, seed=0)
    model, log = train(train_docs, dev_docs, vocab, emb, config)
    # epoch 1 improves on infinity; epoch 2 repeats it exactly and stops
    assert len(log) == 2
    assert log[0]["dev_loss"] == log[1]["dev_loss"]


def test_returned_model_is_best_dev_snapshot():
    vocab, emb, train_docs, dev_docs = micro_task()
    config = TrainConfig(pattern_spec={2: 2}, mlp_hidden=4, batch_size=8,
                         max_epochs=6, patience=10, lr=2e-2, seed=3)
    model, log = train(train_docs, dev_docs, vocab, emb, config)
    best = min(rec["dev_loss"] for rec in log)
    # recompute dev NLL from the returned parameters
    from sopa.automata import encode_documents
    z, _, _ = encode_documents(group_patterns(model.patterns), dev_docs, emb,
                               model.config)
    probs = mlp_probabilities(model.mlp, z.value)
    labels = np.array([d.label for d in dev_docs])
    nll = -np.mean(np.log(probs[np.arange(len(dev_docs)), labels]))
    assert nll == pytest.approx(best, rel=1e-10)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_diverges_on_non_finite_features():
    words = ["boom", "ok"]
    vocab = Vocabulary(words=words, dim=2)
    emb = EmbeddingMatrix(vectors=np.array([[np.inf, 0.0], [0.1, 0.1]]))
    docs = [TokenizedDocument(token_ids=[0, 1], raw_tokens=words, label=1,
                              doc_id=0),
            TokenizedDocument(token_ids=[1, 1], raw_tokens=["ok", "ok"],
                              label=0, doc_id=1)]
    config = TrainConfig(pattern_spec={1: 1}, encoder="identity",
                         semiring="max-sum", mlp_hidden=2, batch_size=4,
                         max_epochs=2, patience=2, seed=0)
    with pytest.raises(TrainingDiverged, match="non-finite"):
        train(docs, docs, vocab, emb, config)


def test_train_rejects_empty_splits():
    vocab, emb, train_docs, dev_docs = micro_task()
    with pytest.raises(ValueError, match="non-empty"):
        train([], dev_docs, vocab, emb, QUICK)
    with pytest.raises(ValueError, match="non-empty"):
        train(train_docs, [], vocab, emb, QUICK)


@pytest.mark.parametrize("field,value,msg", [
    ("lr", 1.0, "learning rate"),
    ("lr", -0.1, "learning rate"),
    ("dropout", 1.0, "dropout"),
    ("mlp_hidden", 0, "positive integer"),
    ("batch_size", 0, "positive integer"),
    ("max_epochs", 0, "positive integer"),
    ("patience", 0, "positive integer"),
])
def test_train_config_validation(field, value, msg):
    kwargs = {"pattern_spec": {1: 1}, field: value}
    with pytest.raises(ValueError, match=msg):
        TrainConfig(**kwargs)


def test_train_config_validates_pattern_side():
    with pytest.raises(ValueError, match="bad pattern spec entry"):
        TrainConfig(pattern_spec={0: 1})
    with pytest.raises(ValueError, match="unknown semiring"):
        TrainConfig(pattern_spec={1: 1}, semiring="tropical-ish")


# -- serialization ----------------------------------------------------------

def test_save_load_round_trip_is_exact(tmp_path):
    vocab, emb, train_docs, dev_docs = micro_task()
    model, _ = train(train_docs, dev_docs, vocab, emb, QUICK)
    path = str(tmp_path / "model.json")
    save_model(model, path)
    again = load_model(path)
    for p1, p2 in zip(model.patterns, again.patterns):
        for name in ("u", "a", "w", "b", "c"):
            assert np.array_equal(getattr(p1, name), getattr(p2, name))
    for name in ("w1", "b1", "w2", "b2"):
        assert np.array_equal(getattr(model.mlp, name), getattr(again.mlp, name))
    assert again.config == model.config
    assert again.vocab_fingerprint == model.vocab_fingerprint
    assert again.num_classes == model.num_classes
    m1 = evaluate(model, dev_docs, vocab, emb)
    m2 = evaluate(again, dev_docs, vocab, emb)
    assert m1 == m2


def test_load_model_rejects_unknown_format(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"format": "someone-elses-v9"}))
    with pytest.raises(ValueError, match="unsupported model format"):
        load_model(str(path))


def test_atomic_write_replaces_existing(tmp_path):
    path = tmp_path / "out.txt"
    path.write_text("old")
    atomic_write_text(str(path), "new")
    assert path.read_text() == "new"
    assert list(tmp_path.iterdir()) == [path]  # no stray temp files


# -- hyperparameter search ---------------------------------------------------

def search_setup():
    vocab, emb, train_docs, dev_docs = micro_task()
    base = TrainConfig(pattern_spec={1: 1}, mlp_hidden=2, batch_size=8,
                       max_epochs=2, patience=3, lr=1e-2, seed=0)
    return vocab, emb, train_docs, dev_docs, base


def test_random_search_returns_ranked_rows():
    vocab, emb, train_docs, dev_docs, base = search_setup()
    space = {"lr": [1e-2, 5e-3], "pattern_spec": ["1:1", "2:1"]}
    best, rows = random_search(space, train_docs, dev_docs, vocab, emb, base,
                               iterations=3, seed=5)
    assert len(rows) == 3
    assert [r["iteration"] for r in rows] == [1, 2, 3]
    for row in rows:
        assert set(row["choice"]) == {"lr", "pattern_spec"}
        assert isinstance(row["choice"]["pattern_spec"], dict)
        assert row["epochs"] >= 1
    top = max(rows, key=lambda r: r["best_dev_acc"])
    assert best.lr == top["config"].lr
    assert best.pattern_spec == top["config"].pattern_spec


def test_random_search_deterministic():
    vocab, emb, train_docs, dev_docs, base = search_setup()
    space = {"lr": [1e-2, 5e-3, 1e-3]}
    _, rows1 = random_search(space, train_docs, dev_docs, vocab, emb, base,
                             iterations=3, seed=7)
    _, rows2 = random_search(space, train_docs, dev_docs, vocab, emb, base,
                             iterations=3, seed=7)
    assert [r["choice"] for r in rows1] == [r["choice"] for r in rows2]
    assert [r["best_dev_acc"] for r in rows1] == [r["best_dev_acc"] for r in rows2]


def test_random_search_single_point_space():
    vocab, emb, train_docs, dev_docs, base = search_setup()
    best, rows = random_search({"lr": [0.0]}, train_docs, dev_docs, vocab, emb,
                               base, iterations=1, seed=0)
    assert best.lr == 0.0
    assert len(rows) == 1


def test_random_search_validation():
    vocab, emb, train_docs, dev_docs, base = search_setup()
    with pytest.raises(ValueError, match="empty search space"):
        random_search({}, train_docs, dev_docs, vocab, emb, base)
    with pytest.raises(ValueError, match="unknown hyperparameter"):
        random_search({"momentum": [0.9]}, train_docs, dev_docs, vocab, emb, base)
    with pytest.raises(ValueError, match="no candidate values"):
        random_search({"lr": []}, train_docs, dev_docs, vocab, emb, base)
    with pytest.raises(ValueError, match="iterations"):
        random_search({"lr": [0.1]}, train_docs, dev_docs, vocab, emb, base,
                      iterations=0)
