"""Reports that show what trained patterns actually matched.

Two report kinds: per-pattern top-k phrase lists (the best-scoring span per
document, ranked across a dataset) and per-document leave-one-out pattern
contributions (how much the predicted-class probability drops when one
pattern's score is zeroed before the MLP).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from sopa.automata import SELF_LOOP, MatchTrace, encode_document, trace_best_match
from sopa.classifier import ModelBundle, _check_fingerprint, mlp_probabilities
from sopa.embeddings import EmbeddingMatrix, TokenizedDocument, Vocabulary
from sopa.semiring import get_semiring

EPSILON_MARK = "ε"  # ε


@dataclass
class PhraseEntry:
    """One matched span: step annotations, source document, span, score."""

    doc_id: int
    start: int  # 1-based, inclusive
    end: int
    score: float
    steps: list[dict] = field(default_factory=list)
    # each step: {"kind": main|self-loop|epsilon, "token": str|None, "state": int}


@dataclass
class PatternReport:
    pattern_index: int
    pattern_length: int
    entries: list[PhraseEntry] = field(default_factory=list)


@dataclass
class ContributionEntry:
    pattern_index: int
    contribution: float
    phrase: PhraseEntry | None


@dataclass
class ContributionReport:
    doc_id: int
    predicted_label: int
    predicted_probability: float
    contributions: list[float] = field(default_factory=list)
    top: list[ContributionEntry] = field(default_factory=list)


def _phrase_from_trace(trace: MatchTrace, doc: TokenizedDocument) -> PhraseEntry:
    steps = []
    for step in trace.steps:
        token = None if step.token_pos is None else doc.raw_tokens[step.token_pos - 1]
        steps.append({"kind": step.kind, "token": token, "state": step.state})
    return PhraseEntry(doc_id=doc.doc_id, start=trace.start, end=trace.end,
                       score=float(trace.score), steps=steps)


def best_phrase(model: ModelBundle, doc: TokenizedDocument,
                embeddings: EmbeddingMatrix, pattern_index: int) -> PhraseEntry | None:
    trace = trace_best_match(model.patterns[pattern_index], doc, embeddings,
                             model.config, pattern_index=pattern_index)
    return None if trace is None else _phrase_from_trace(trace, doc)


def top_k_phrases(model: ModelBundle, dataset: list[TokenizedDocument],
                  vocab: Vocabulary, embeddings: EmbeddingMatrix,
                  pattern_index: int, k: int) -> PatternReport:
    """The k best-scoring matches of one pattern across a dataset.

    Each document contributes its single best span.  Ranking is by descending
    score with ascending document id breaking ties.  Requires a max semiring;
    there is no single best path to report under sum-product.
    """
    if not get_semiring(model.config.semiring).idempotent_plus:
        raise ValueError("phrase reports require a max semiring")
    _check_fingerprint(model, vocab)
    if not 0 <= pattern_index < len(model.patterns):
        raise ValueError(f"pattern index {pattern_index} out of range")
    entries = []
    for doc in dataset:
        phrase = best_phrase(model, doc, embeddings, pattern_index)
        if phrase is not None:
            entries.append(phrase)
    entries.sort(key=lambda e: (-e.score, e.doc_id))
    return PatternReport(pattern_index=pattern_index,
                         pattern_length=model.patterns[pattern_index].length,
                         entries=entries[:max(k, 0)])


def pattern_contributions(model: ModelBundle, doc: TokenizedDocument,
                          vocab: Vocabulary, embeddings: EmbeddingMatrix,
                          top_n: int = 5) -> ContributionReport:
    """Leave-one-out contribution of each pattern to the predicted class.

    Runs the MLP k+1 times: once on the full feature vector, then once per
    pattern with that entry zeroed (the numeric 0.0; the MLP consumes raw
    scores).  contribution[p] = original predicted-class probability minus
    the zeroed-p probability, so unused patterns contribute exactly 0.
    """
    _check_fingerprint(model, vocab)
    z = encode_document(model.patterns, doc, embeddings, model.config)
    probs = mlp_probabilities(model.mlp, z)
    predicted = int(probs.argmax())
    original = float(probs[predicted])
    contributions = []
    for p in range(len(model.patterns)):
        z_without = z.copy()
        z_without[p] = 0.0
        contributions.append(original - float(mlp_probabilities(model.mlp, z_without)[predicted]))

    traceable = get_semiring(model.config.semiring).idempotent_plus
    order = np.argsort(-np.array(contributions), kind="stable")[:max(top_n, 0)]
    top = []
    for p in order:
        phrase = best_phrase(model, doc, embeddings, int(p)) if traceable else None
        top.append(ContributionEntry(pattern_index=int(p),
                                     contribution=contributions[p], phrase=phrase))
    return ContributionReport(doc_id=doc.doc_id, predicted_label=predicted,
                              predicted_probability=original,
                              contributions=contributions, top=top)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _phrase_text(steps: list[dict]) -> str:
    parts = []
    for step in steps:
        if step["token"] is None:
            parts.append(EPSILON_MARK)
        elif step["kind"] == SELF_LOOP:
            parts.append(step["token"] + "_SL")
        else:
            parts.append(step["token"])
    return " ".join(parts)


def _render_pattern_plain(report: PatternReport) -> str:
    lines = [f"pattern {report.pattern_index} (length {report.pattern_length})"]
    for e in report.entries:
        lines.append(f"  {e.score:.6f}  doc {e.doc_id}  span {e.start}..{e.end}: "
                     f"{_phrase_text(e.steps)}")
    return "\n".join(lines) + "\n"


def _render_contribution_plain(report: ContributionReport) -> str:
    lines = [f"doc {report.doc_id}: predicted class {report.predicted_label} "
             f"(p={report.predicted_probability:.4f})"]
    for entry in report.top:
        where = ""
        if entry.phrase is not None:
            where = (f"  span {entry.phrase.start}..{entry.phrase.end}: "
                     f"{_phrase_text(entry.phrase.steps)}")
        lines.append(f"  pattern {entry.pattern_index}  {entry.contribution:+.6f}{where}")
    return "\n".join(lines) + "\n"


def _phrase_record(e: PhraseEntry) -> dict:
    return {"doc_id": e.doc_id, "start": e.start, "end": e.end,
            "score": e.score, "steps": e.steps}


def render_report(report: PatternReport | ContributionReport,
                  format: str = "plain-text") -> str:
    """Render either report kind; structured output is line-delimited JSON."""
    if format == "plain-text":
        if isinstance(report, PatternReport):
            return _render_pattern_plain(report)
        return _render_contribution_plain(report)
    if format != "structured":
        raise ValueError(f"unknown report format {format!r}")
    lines = []
    if isinstance(report, PatternReport):
        lines.append({"type": "pattern_report", "pattern_index": report.pattern_index,
                      "pattern_length": report.pattern_length})
        for e in report.entries:
            lines.append({"type": "phrase", **_phrase_record(e)})
    else:
        lines.append({"type": "contribution_report", "doc_id": report.doc_id,
                      "predicted_label": report.predicted_label,
                      "predicted_probability": report.predicted_probability,
                      "contributions": report.contributions})
        for entry in report.top:
            phrase = None if entry.phrase is None else _phrase_record(entry.phrase)
            lines.append({"type": "contributor", "pattern_index": entry.pattern_index,
                          "contribution": entry.contribution, "phrase": phrase})
    return "\n".join(json.dumps(rec) for rec in lines) + "\n"


def parse_structured(text: str) -> PatternReport | ContributionReport:
    """Inverse of render_report(..., "structured")."""
    records = [json.loads(line) for line in text.splitlines() if line.strip()]
    if not records:
        raise ValueError("empty report text")
    head = records[0]
    if head["type"] == "pattern_report":
        entries = [PhraseEntry(doc_id=r["doc_id"], start=r["start"], end=r["end"],
                               score=r["score"], steps=r["steps"])
                   for r in records[1:]]
        return PatternReport(pattern_index=head["pattern_index"],
                             pattern_length=head["pattern_length"], entries=entries)
    if head["type"] == "contribution_report":
        top = []
        for r in records[1:]:
            phrase = None
            if r["phrase"] is not None:
                p = r["phrase"]
                phrase = PhraseEntry(doc_id=p["doc_id"], start=p["start"],
                                     end=p["end"], score=p["score"], steps=p["steps"])
            top.append(ContributionEntry(pattern_index=r["pattern_index"],
                                         contribution=r["contribution"], phrase=phrase))
        return ContributionReport(doc_id=head["doc_id"],
                                  predicted_label=head["predicted_label"],
                                  predicted_probability=head["predicted_probability"],
                                  contributions=head["contributions"], top=top)
    raise ValueError(f"unknown report record type {head['type']!r}")
