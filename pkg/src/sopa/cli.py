"""Command-line interface: train, eval, explain, search, oracle-check.

Option precedence is CLI flag > config file (--config, JSON) > built-in
default.  Every run logs its fully resolved configuration and seed.  All
output files are written atomically.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from sopa.autodiff import Param, Tape, finite_difference_check
from sopa.automata import (encode_documents, group_params, group_patterns,
                           parse_pattern_spec)
from sopa.classifier import (TrainConfig, TrainingDiverged, _check_fingerprint,
                             _mlp_logits, atomic_write_text, evaluate,
                             load_model, random_search, save_model, train)
from sopa.embeddings import load_embeddings, read_dataset
from sopa.interpret import (pattern_contributions, render_report, top_k_phrases)
from sopa.reference import brute_force_doc_score, cnn_filter_of, explicit_cnn_score
from sopa.semiring import KINDS, get_semiring

_DEFAULTS = {
    "seed": 0,
    "semiring": "max-product",
    "encoder": "sigmoid",
    "patterns": "6:10,5:10,4:10",
    "lr": 1e-3,
    "dropout": 0.0,
    "mlp_hidden": 25,
    "batch_size": 150,
    "max_epochs": 250,
    "patience": 30,
    "self_loops": True,
    "epsilons": True,
    "lowercase": False,
}

ORACLE_DOC_LIMIT = 8
ORACLE_TOLERANCE = 1e-10
GRAD_TOLERANCE = 1e-4


def _add_shared_flags(cmd: argparse.ArgumentParser):
    cmd.add_argument("--config", help="JSON file of defaults (flag > file > built-in)")
    cmd.add_argument("--seed", type=int)
    cmd.add_argument("--semiring", choices=KINDS)
    cmd.add_argument("--encoder", choices=("sigmoid", "identity"))
    cmd.add_argument("--patterns", help="pattern spec, e.g. 6:10,5:10,4:10")
    cmd.add_argument("--no-self-loops", action="store_const", const=True,
                     dest="no_self_loops", help="disable self-loop transitions")
    cmd.add_argument("--no-epsilon", action="store_const", const=True,
                     dest="no_epsilon", help="disable epsilon transitions")
    cmd.add_argument("--lr", type=float)
    cmd.add_argument("--dropout", type=float)
    cmd.add_argument("--mlp-hidden", type=int)
    cmd.add_argument("--batch-size", type=int)
    cmd.add_argument("--max-epochs", type=int)
    cmd.add_argument("--patience", type=int)
    cmd.add_argument("--lowercase", action="store_const", const=True)


class _Resolved:
    """Flag values merged with the config file and defaults."""

    def __init__(self, args: argparse.Namespace):
        file_values = {}
        if getattr(args, "config", None):
            with open(args.config) as f:
                file_values = json.load(f)
            if not isinstance(file_values, dict):
                raise ValueError(f"{args.config}: config file must hold a JSON object")
        self._args = args
        self._file = file_values

    def get(self, key: str):
        value = getattr(self._args, key, None)
        if value is None:
            value = self._file.get(key, _DEFAULTS[key])
        return value

    def flag_off(self, negative: str, key: str) -> bool:
        """Resolve a --no-X switch against config key X (default on)."""
        if getattr(self._args, negative, None):
            return False
        return bool(self._file.get(key, _DEFAULTS[key]))

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            pattern_spec=parse_pattern_spec(self.get("patterns")),
            semiring=self.get("semiring"),
            encoder=self.get("encoder"),
            self_loops=self.flag_off("no_self_loops", "self_loops"),
            epsilons=self.flag_off("no_epsilon", "epsilons"),
            lr=self.get("lr"),
            dropout=self.get("dropout"),
            mlp_hidden=self.get("mlp_hidden"),
            batch_size=self.get("batch_size"),
            max_epochs=self.get("max_epochs"),
            patience=self.get("patience"),
            seed=self.get("seed"),
        )


def _config_record(config: TrainConfig) -> dict:
    record = {name: getattr(config, name)
              for name in TrainConfig.__dataclass_fields__}
    record["pattern_spec"] = {str(k): v for k, v in config.pattern_spec.items()}
    return record


def _log_resolved(config: TrainConfig, extra: dict | None = None):
    record = {"resolved_config": _config_record(config)}
    if extra:
        record.update(extra)
    print(json.dumps(record, sort_keys=True))


def cmd_train(args: argparse.Namespace) -> int:
    resolved = _Resolved(args)
    config = resolved.train_config()
    lowercase = bool(resolved.get("lowercase"))
    _log_resolved(config, {"command": "train"})
    vocab, embeddings = load_embeddings(args.embeddings)
    train_set = read_dataset(args.train, vocab, lowercase)
    dev_set = read_dataset(args.dev, vocab, lowercase)
    model, log = train(train_set, dev_set, vocab, embeddings, config)
    save_model(model, args.out)
    log_path = args.log or args.out + ".log.jsonl"
    atomic_write_text(log_path, "".join(json.dumps(rec) + "\n" for rec in log))
    best = min(log, key=lambda rec: rec["dev_loss"])
    print(f"model written to {args.out} ({len(log)} epochs; "
          f"best dev loss {best['dev_loss']:.6f}, dev accuracy {best['dev_acc']:.4f})")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    vocab, embeddings = load_embeddings(args.embeddings)
    model = load_model(args.model)
    dataset = read_dataset(args.data, vocab, bool(args.lowercase))
    metrics = evaluate(model, dataset, vocab, embeddings)
    print(f"accuracy {metrics['accuracy']:.4f}")
    metrics_path = args.metrics_out or args.data + ".metrics.json"
    atomic_write_text(metrics_path, json.dumps(metrics, indent=1) + "\n")
    return 0


def cmd_explain(args: argparse.Namespace) -> int:
    vocab, embeddings = load_embeddings(args.embeddings)
    model = load_model(args.model)
    dataset = read_dataset(args.data, vocab, bool(args.lowercase))
    if args.mode == "patterns":
        reports = [top_k_phrases(model, dataset, vocab, embeddings, p, args.k)
                   for p in range(model.num_patterns)]
    else:
        if args.doc_id is None:
            raise ValueError("--mode doc requires --doc-id")
        if not 0 <= args.doc_id < len(dataset):
            raise ValueError(f"--doc-id {args.doc_id} out of range for "
                             f"{len(dataset)} documents")
        reports = [pattern_contributions(model, dataset[args.doc_id], vocab,
                                         embeddings, top_n=args.top_n)]
    plain = "\n".join(render_report(r, "plain-text") for r in reports)
    print(plain, end="")
    if args.out:
        atomic_write_text(args.out + ".txt", plain)
        structured = "".join(render_report(r, "structured") for r in reports)
        atomic_write_text(args.out + ".jsonl", structured)
    return 0


def cmd_search(args: argparse.Namespace) -> int:
    resolved = _Resolved(args)
    base = resolved.train_config()
    _log_resolved(base, {"command": "search", "iterations": args.iterations})
    with open(args.space) as f:
        space = json.load(f)
    vocab, embeddings = load_embeddings(args.embeddings)
    lowercase = bool(resolved.get("lowercase"))
    train_set = read_dataset(args.train, vocab, lowercase)
    dev_set = read_dataset(args.dev, vocab, lowercase)
    best, results = random_search(space, train_set, dev_set, vocab, embeddings,
                                  base, iterations=args.iterations,
                                  seed=base.seed)
    rows = []
    for row in results:
        rows.append({"iteration": row["iteration"],
                     "config": _config_record(row["config"]),
                     "best_dev_acc": row["best_dev_acc"],
                     "best_dev_loss": row["best_dev_loss"],
                     "epochs": row["epochs"]})
        print(f"iteration {row['iteration']}: best dev accuracy "
              f"{row['best_dev_acc']:.4f} over {row['epochs']} epochs")
    atomic_write_text(args.out, json.dumps(_config_record(best), indent=1) + "\n")
    results_path = args.results_out or args.out + ".results.jsonl"
    atomic_write_text(results_path, "".join(json.dumps(r) + "\n" for r in rows))
    print(f"best config written to {args.out}")
    return 0


def _rel_deviation(a: float, b: float) -> float:
    if a == b:
        return 0.0
    return abs(a - b) / max(abs(a), abs(b), 1e-30)


def cmd_oracle_check(args: argparse.Namespace) -> int:
    vocab, embeddings = load_embeddings(args.embeddings)
    model = load_model(args.model)
    _check_fingerprint(model, vocab)
    docs = read_dataset(args.docs, vocab, bool(args.lowercase))
    sr = get_semiring(model.config.semiring)

    scored = []
    skipped = 0
    for doc in docs:
        if len(doc) > ORACLE_DOC_LIMIT:
            print(f"warning: doc {doc.doc_id} has {len(doc)} tokens "
                  f"(> {ORACLE_DOC_LIMIT}); skipped", file=sys.stderr)
            skipped += 1
        else:
            scored.append(doc)
    if not scored:
        raise ValueError("no documents short enough for the oracle bounds")

    failures = 0
    worst_score = 0.0
    groups = group_patterns(model.patterns)
    for doc in scored:
        z, _, _ = encode_documents(groups, [doc], embeddings, model.config)
        doc_matrix = embeddings.doc_matrix(doc)
        for p, pattern in enumerate(model.patterns):
            oracle = brute_force_doc_score(pattern, doc_matrix, model.config)
            engine = float(z.value[0, p])
            if sr.idempotent_plus:
                deviation = 0.0 if engine == oracle else _rel_deviation(engine, oracle)
                ok = engine == oracle
            else:
                deviation = _rel_deviation(engine, oracle)
                ok = deviation <= ORACLE_TOLERANCE
            worst_score = max(worst_score, deviation)
            if not ok:
                failures += 1
    print(f"recurrence vs brute force: {len(scored)} docs x "
          f"{len(model.patterns)} patterns, worst deviation {worst_score:.3e}")

    worst_cnn = 0.0
    if model.config.cnn_mode:
        for doc in scored:
            z, _, _ = encode_documents(groups, [doc], embeddings, model.config)
            doc_matrix = embeddings.doc_matrix(doc)
            for p, pattern in enumerate(model.patterns):
                filt, biases = cnn_filter_of(pattern)
                cnn = explicit_cnn_score(filt, biases, doc_matrix)
                deviation = _rel_deviation(float(z.value[0, p]), cnn)
                worst_cnn = max(worst_cnn, deviation)
                if deviation > ORACLE_TOLERANCE:
                    failures += 1
        print(f"CNN-mode equivalence: worst deviation {worst_cnn:.3e}")

    grad_docs = scored[:4]
    labels = np.array([doc.label for doc in grad_docs])
    if labels.max() >= model.num_classes:
        raise ValueError("document labels exceed the model's class count")
    param_groups = group_patterns(model.patterns, as_params=True)
    mlp_params = {name: Param(f"mlp.{name}", getattr(model.mlp, name).copy())
                  for name in ("w1", "b1", "w2", "b2")}
    params = group_params(param_groups) + list(mlp_params.values())

    def forward(tape: Tape):
        z, _, _ = encode_documents(param_groups, grad_docs, embeddings,
                                   model.config, tape=tape)
        leaves = {name: tape.leaf(p) if tape.grad_enabled else tape.const(p.value)
                  for name, p in mlp_params.items()}
        logits = _mlp_logits(tape, z, leaves, 0.0, None, False)
        return tape.cross_entropy(logits, labels)

    tape = Tape(grad=True)
    loss = forward(tape)
    for p in params:
        p.zero_grad()
    tape.backward(loss)
    report = finite_difference_check(lambda: float(forward(Tape(grad=False)).value),
                                     params, max_checks=args.grad_checks)
    print(f"gradient check: {report.checked} scalars, "
          f"max relative error {report.max_rel_error:.3e}")
    # not-less-than so a NaN loss (e.g. unmatched max-sum features) fails loudly
    if not report.max_rel_error < GRAD_TOLERANCE:
        failures += 1
        for entry in report.worst[:3]:
            print(f"  worst: {entry.param}{entry.index} analytic {entry.analytic:.6e} "
                  f"numeric {entry.numeric:.6e}", file=sys.stderr)

    if skipped:
        print(f"skipped {skipped} over-long documents", file=sys.stderr)
    if failures:
        print(f"FAIL ({failures} check(s) failed)")
        return 1
    print("PASS")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sopa",
        description="Train, evaluate, and inspect soft-pattern text classifiers.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--train", required=True, help="training set (label<TAB>text)")
    p.add_argument("--dev", required=True, help="development set")
    p.add_argument("--embeddings", required=True, help="word vector file")
    p.add_argument("--out", required=True, help="model output path")
    p.add_argument("--log", help="training log path (default: <out>.log.jsonl)")
    _add_shared_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model on a labeled dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--metrics-out", help="metrics file (default: <data>.metrics.json)")
    p.add_argument("--lowercase", action="store_const", const=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="emit interpretability reports")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--mode", choices=("patterns", "doc"), required=True)
    p.add_argument("--k", type=int, default=5, help="matches per pattern report")
    p.add_argument("--doc-id", type=int, help="document to explain (--mode doc)")
    p.add_argument("--top-n", type=int, default=5,
                   help="contributors to annotate (--mode doc)")
    p.add_argument("--out", help="output prefix; writes <out>.txt and <out>.jsonl")
    p.add_argument("--lowercase", action="store_const", const=True)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("search", help="random hyperparameter search")
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--space", required=True, help="JSON file of candidate values")
    p.add_argument("--iterations", type=int, default=30)
    p.add_argument("--out", required=True, help="best config output path")
    p.add_argument("--results-out", help="results table (default: <out>.results.jsonl)")
    _add_shared_flags(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("oracle-check", help="certify a model against the oracles")
    p.add_argument("--model", required=True)
    p.add_argument("--docs", required=True,
                   help=f"small labeled dataset (<= {ORACLE_DOC_LIMIT} tokens per doc)")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--grad-checks", type=int, default=40,
                   help="number of scalars probed by finite differences")
    p.add_argument("--lowercase", action="store_const", const=True)
    p.set_defaults(func=cmd_oracle_check)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError, TrainingDiverged,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
