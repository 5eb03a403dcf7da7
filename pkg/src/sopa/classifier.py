"""Document classifier on top of pattern scores.

The k per-pattern document scores form a feature vector z that feeds a
two-layer MLP with a softmax output.  Training is minibatch Adam on
cross-entropy with epoch-level early stopping on development loss; the
returned model is the best-dev-loss snapshot.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, replace

import numpy as np

from sopa.autodiff import Adam, Node, Param, Tape
from sopa.automata import (PatternParams, PatternSetConfig, group_params,
                           group_patterns, make_patterns, parse_pattern_spec,
                           ungroup_patterns, encode_documents)
from sopa.embeddings import EmbeddingMatrix, TokenizedDocument, Vocabulary

MODEL_FORMAT = "sopa-model-v1"


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass
class MlpParams:
    """Two-layer perceptron: rectifier hidden layer, linear output."""

    w1: np.ndarray  # (k, h)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (h, C)
    b2: np.ndarray  # (C,)

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64)
        k, h = self.w1.shape
        h2, c = self.w2.shape
        if self.b1.shape != (h,) or h2 != h or self.b2.shape != (c,):
            raise ValueError("inconsistent MLP layer shapes")

    @property
    def num_features(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def num_classes(self) -> int:
        return self.w2.shape[1]

    @classmethod
    def random(cls, k: int, hidden: int, num_classes: int,
               rng: np.random.Generator, std: float = 0.1):
        return cls(
            w1=rng.normal(0.0, std, (k, hidden)),
            b1=rng.normal(0.0, std, hidden),
            w2=rng.normal(0.0, std, (hidden, num_classes)),
            b2=rng.normal(0.0, std, num_classes),
        )


@dataclass(frozen=True)
class TrainConfig:
    pattern_spec: dict[int, int]
    semiring: str = "max-product"
    encoder: str = "sigmoid"
    self_loops: bool = True
    epsilons: bool = True
    lr: float = 1e-3
    dropout: float = 0.0
    mlp_hidden: int = 25
    batch_size: int = 150
    max_epochs: int = 250
    patience: int = 30
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lr < 1.0:
            raise ValueError(f"learning rate must lie in [0, 1), got {self.lr}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        for name in ("mlp_hidden", "batch_size", "max_epochs", "patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        self.pattern_config()  # validates spec/semiring/encoder

    def pattern_config(self) -> PatternSetConfig:
        return PatternSetConfig(
            pattern_spec=self.pattern_spec, semiring=self.semiring,
            encoder=self.encoder, self_loops=self.self_loops,
            epsilons=self.epsilons)


@dataclass
class ModelBundle:
    patterns: list[PatternParams]
    mlp: MlpParams
    config: PatternSetConfig
    vocab_fingerprint: dict
    num_classes: int

    @property
    def num_patterns(self) -> int:
        return len(self.patterns)


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def mlp_probabilities(mlp: MlpParams, z: np.ndarray) -> np.ndarray:
    """Class probabilities from a raw feature vector or batch (no dropout)."""
    z = np.asarray(z, dtype=np.float64)
    hidden = np.maximum(z @ mlp.w1 + mlp.b1, 0.0)
    return softmax(hidden @ mlp.w2 + mlp.b2)


def _check_fingerprint(model: ModelBundle, vocab: Vocabulary):
    if model.vocab_fingerprint != vocab.fingerprint():
        raise ValueError("vocabulary fingerprint does not match the model; "
                         "these embeddings are not the ones it was trained with")


def _dropout_node(tape: Tape, x: Node, rate: float, rng: np.random.Generator) -> Node:
    if rate <= 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return tape.mul(x, tape.const(mask))


def _mlp_logits(tape: Tape, z: Node, leaves: dict[str, Node], dropout: float,
                rng: np.random.Generator | None, train_mode: bool) -> Node:
    if train_mode and dropout > 0.0:
        z = _dropout_node(tape, z, dropout, rng)
    hidden = tape.relu(tape.add_bias(tape.matmul(z, leaves["w1"]), leaves["b1"]))
    if train_mode and dropout > 0.0:
        hidden = _dropout_node(tape, hidden, dropout, rng)
    return tape.add_bias(tape.matmul(hidden, leaves["w2"]), leaves["b2"])


def forward_logits(model: ModelBundle, doc: TokenizedDocument, vocab: Vocabulary,
                   embeddings: EmbeddingMatrix, train_mode: bool = False,
                   dropout: float = 0.0,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Class probabilities for one document.

    train_mode applies inverted dropout to the feature vector and the hidden
    layer, drawing masks from rng; inference is deterministic.
    """
    _check_fingerprint(model, vocab)
    if train_mode and dropout > 0.0 and rng is None:
        raise ValueError("dropout in train mode needs a random generator")
    tape = Tape(grad=False)
    groups = group_patterns(model.patterns)
    z, _, _ = encode_documents(groups, [doc], embeddings, model.config, tape=tape)
    leaves = {name: tape.const(getattr(model.mlp, name))
              for name in ("w1", "b1", "w2", "b2")}
    logits = _mlp_logits(tape, z, leaves, dropout, rng, train_mode)
    return softmax(logits.value)[0]


def _batched_probabilities(model: ModelBundle, docs: list[TokenizedDocument],
                           embeddings: EmbeddingMatrix,
                           batch_size: int = 150) -> np.ndarray:
    groups = group_patterns(model.patterns)
    out = []
    for lo in range(0, len(docs), batch_size):
        batch = docs[lo:lo + batch_size]
        z, _, _ = encode_documents(groups, batch, embeddings, model.config)
        out.append(mlp_probabilities(model.mlp, z.value))
    return np.concatenate(out, axis=0)


def evaluate(model: ModelBundle, dataset: list[TokenizedDocument], vocab: Vocabulary,
             embeddings: EmbeddingMatrix, batch_size: int = 150) -> dict:
    """Accuracy and per-class counts under argmax prediction (ties -> class 0)."""
    _check_fingerprint(model, vocab)
    if not dataset:
        raise ValueError("empty evaluation dataset")
    labels = _labels_of(dataset)
    probs = _batched_probabilities(model, dataset, embeddings, batch_size)
    preds = probs.argmax(axis=1)
    correct = preds == labels
    per_class: dict[int, dict[str, int]] = {}
    for label in sorted(set(labels.tolist())):
        sel = labels == label
        per_class[int(label)] = {"total": int(sel.sum()),
                                 "correct": int(correct[sel].sum())}
    return {
        "accuracy": float(correct.mean()),
        "total": len(dataset),
        "correct": int(correct.sum()),
        "per_class": per_class,
    }


def _labels_of(dataset: list[TokenizedDocument]) -> np.ndarray:
    labels = []
    for doc in dataset:
        if doc.label is None:
            raise ValueError(f"document {doc.doc_id} has no label")
        labels.append(doc.label)
    return np.array(labels, dtype=np.int64)


def count_parameters(model: ModelBundle) -> tuple[int, int]:
    """Trainable scalar counts: (pattern side, MLP side).

    Per pattern of length L over e-dim embeddings: (2e+3)*L, counting the two
    weight vectors and three scalars per slot.  MLP: (k+1)*h + (h+1)*C.
    """
    sopa_count = sum((2 * p.dim + 3) * p.length for p in model.patterns)
    k, h, c = model.mlp.num_features, model.mlp.hidden, model.mlp.num_classes
    return sopa_count, (k + 1) * h + (h + 1) * c


def train(train_set: list[TokenizedDocument], dev_set: list[TokenizedDocument],
          vocab: Vocabulary, embeddings: EmbeddingMatrix,
          config: TrainConfig) -> tuple[ModelBundle, list[dict]]:
    """Minibatch Adam on cross-entropy with dev-loss early stopping.

    Returns the best-dev-loss snapshot and one log record per epoch.  All
    randomness (init, shuffling, dropout) flows from one generator seeded by
    config.seed, so fixed-seed runs are bit-identical.
    """
    if not train_set or not dev_set:
        raise ValueError("training and development sets must be non-empty")
    train_labels = _labels_of(train_set)
    dev_labels = _labels_of(dev_set)
    num_classes = max(2, int(max(train_labels.max(), dev_labels.max())) + 1)

    pconfig = config.pattern_config()
    rng = np.random.default_rng(config.seed)
    patterns = make_patterns(pconfig, embeddings.dim, rng)
    groups = group_patterns(patterns, as_params=True)
    k = pconfig.total_patterns
    mlp_init = MlpParams.random(k, config.mlp_hidden, num_classes, rng)
    mlp_params = {name: Param(f"mlp.{name}", getattr(mlp_init, name))
                  for name in ("w1", "b1", "w2", "b2")}
    params = group_params(groups) + list(mlp_params.values())
    optimizer = Adam(params, lr=config.lr)

    def batch_loss(docs: list[TokenizedDocument], labels: np.ndarray,
                   tape: Tape, train_mode: bool) -> Node:
        z, _, _ = encode_documents(groups, docs, embeddings, pconfig, tape=tape)
        leaves = {name: tape.leaf(p) if tape.grad_enabled else tape.const(p.value)
                  for name, p in mlp_params.items()}
        logits = _mlp_logits(tape, z, leaves, config.dropout, rng, train_mode)
        return tape.cross_entropy(logits, labels)

    def dev_metrics() -> tuple[float, float]:
        total_loss = 0.0
        correct = 0
        for lo in range(0, len(dev_set), config.batch_size):
            docs = dev_set[lo:lo + config.batch_size]
            labels = dev_labels[lo:lo + config.batch_size]
            tape = Tape(grad=False)
            z, _, _ = encode_documents(groups, docs, embeddings, pconfig, tape=tape)
            leaves = {name: tape.const(p.value) for name, p in mlp_params.items()}
            logits = _mlp_logits(tape, z, leaves, 0.0, None, False)
            loss = tape.cross_entropy(logits, labels)
            total_loss += float(loss.value) * len(docs)
            correct += int((logits.value.argmax(axis=1) == labels).sum())
        return total_loss / len(dev_set), correct / len(dev_set)

    log: list[dict] = []
    best_loss = np.inf
    best_state = [p.value.copy() for p in params]
    since_improved = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_set))
        epoch_loss = 0.0
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            docs = [train_set[i] for i in idx]
            tape = Tape(grad=True)
            loss = batch_loss(docs, train_labels[idx], tape, train_mode=True)
            if not np.isfinite(loss.value):
                raise TrainingDiverged(
                    f"non-finite training loss {loss.value!r} at epoch {epoch}")
            optimizer.zero_grad()
            tape.backward(loss)
            optimizer.step()
            epoch_loss += float(loss.value) * len(docs)
        dev_loss, dev_acc = dev_metrics()
        if not np.isfinite(dev_loss):
            raise TrainingDiverged(
                f"non-finite development loss {dev_loss!r} at epoch {epoch}")
        log.append({"epoch": epoch, "train_loss": epoch_loss / len(train_set),
                    "dev_loss": dev_loss, "dev_acc": dev_acc})
        if dev_loss < best_loss:
            best_loss = dev_loss
            best_state = [p.value.copy() for p in params]
            since_improved = 0
        else:
            since_improved += 1
            if since_improved >= config.patience:
                break

    for p, value in zip(params, best_state):
        p.value[...] = value
    model = ModelBundle(
        patterns=ungroup_patterns(groups),
        mlp=MlpParams(**{name: p.value.copy() for name, p in mlp_params.items()}),
        config=pconfig,
        vocab_fingerprint=vocab.fingerprint(),
        num_classes=num_classes,
    )
    return model, log


def random_search(space: dict[str, list], train_set: list[TokenizedDocument],
                  dev_set: list[TokenizedDocument], vocab: Vocabulary,
                  embeddings: EmbeddingMatrix, base_config: TrainConfig,
                  iterations: int = 30, seed: int = 0) -> tuple[TrainConfig, list[dict]]:
    """Uniform random hyperparameter search ranked by best dev accuracy.

    space maps TrainConfig field names to candidate lists; fields absent from
    the space keep base_config's value.  Sampling order is the sorted field
    order, so a fixed seed reproduces the sampled sequence.
    """
    if not space:
        raise ValueError("empty search space")
    for name, candidates in space.items():
        if name not in TrainConfig.__dataclass_fields__:
            raise ValueError(f"unknown hyperparameter {name!r}")
        if not candidates:
            raise ValueError(f"no candidate values for {name!r}")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")

    rng = np.random.default_rng(seed)
    results: list[dict] = []
    best_row = None
    for it in range(1, iterations + 1):
        choice = {}
        for name in sorted(space):
            candidates = space[name]
            value = candidates[int(rng.integers(len(candidates)))]
            if name == "pattern_spec" and isinstance(value, str):
                value = parse_pattern_spec(value)
            choice[name] = value
        config = replace(base_config, **choice)
        model, log = train(train_set, dev_set, vocab, embeddings, config)
        best_epoch = max(log, key=lambda rec: rec["dev_acc"])
        row = {"iteration": it, "choice": choice, "config": config,
               "best_dev_acc": best_epoch["dev_acc"],
               "best_dev_loss": min(rec["dev_loss"] for rec in log),
               "epochs": len(log)}
        results.append(row)
        if best_row is None or row["best_dev_acc"] > best_row["best_dev_acc"]:
            best_row = row
    return best_row["config"], results


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def atomic_write_text(path: str, text: str):
    """Write via a temp file in the target directory plus rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model(model: ModelBundle, path: str):
    """JSON model file; decimal float repr keeps the round trip bit-exact."""
    payload = {
        "format": MODEL_FORMAT,
        "config": {
            "pattern_spec": {str(k): v for k, v in model.config.pattern_spec.items()},
            "semiring": model.config.semiring,
            "encoder": model.config.encoder,
            "self_loops": model.config.self_loops,
            "epsilons": model.config.epsilons,
        },
        "num_classes": model.num_classes,
        "vocab_fingerprint": model.vocab_fingerprint,
        "patterns": [
            {name: getattr(p, name).tolist() for name in ("u", "a", "w", "b", "c")}
            for p in model.patterns
        ],
        "mlp": {name: getattr(model.mlp, name).tolist()
                for name in ("w1", "b1", "w2", "b2")},
    }
    atomic_write_text(path, json.dumps(payload, indent=1))


def load_model(path: str) -> ModelBundle:
    with open(path) as f:
        payload = json.load(f)
    fmt = payload.get("format")
    if fmt != MODEL_FORMAT:
        raise ValueError(f"{path}: unsupported model format {fmt!r}")
    cfg = payload["config"]
    config = PatternSetConfig(
        pattern_spec={int(k): v for k, v in cfg["pattern_spec"].items()},
        semiring=cfg["semiring"], encoder=cfg["encoder"],
        self_loops=cfg["self_loops"], epsilons=cfg["epsilons"])
    patterns = [PatternParams(**{name: np.array(entry[name], dtype=np.float64)
                                 for name in ("u", "a", "w", "b", "c")})
                for entry in payload["patterns"]]
    mlp = MlpParams(**{name: np.array(payload["mlp"][name], dtype=np.float64)
                       for name in ("w1", "b1", "w2", "b2")})
    return ModelBundle(patterns=patterns, mlp=mlp, config=config,
                       vocab_fingerprint=payload["vocab_fingerprint"],
                       num_classes=payload["num_classes"])
