"""Phrase reports, leave-one-out contributions, and report rendering."""

import numpy as np
import pytest

from sopa.automata import (EPSILON, MAIN, SELF_LOOP, PatternParams,
                           PatternSetConfig, encode_document)
from sopa.classifier import MlpParams, ModelBundle, mlp_probabilities, train
from sopa.embeddings import TokenizedDocument
from sopa.interpret import (ContributionEntry, ContributionReport,
                            PatternReport, PhraseEntry, parse_structured,
                            pattern_contributions, render_report,
                            top_k_phrases)
from sopa.reference import dense_span_score

from _synth import micro_task

TRAINED = {}


def trained_micro(request=None):
    """One small trained model shared across this module's tests."""
    if "bundle" not in TRAINED:
        vocab, emb, train_docs, dev_docs = micro_task()
        from sopa.classifier import TrainConfig
        config = TrainConfig(pattern_spec={2: 3}, mlp_hidden=4, batch_size=8,
                             max_epochs=8, patience=10, lr=2e-2, seed=2)
        model, _ = train(train_docs, dev_docs, vocab, emb, config)
        TRAINED["bundle"] = (model, vocab, emb, train_docs, dev_docs)
    return TRAINED["bundle"]


# -- top-k phrases -----------------------------------------------------------

def test_top_k_requires_max_semiring():
    model, vocab, emb, docs, _ = trained_micro()
    sp = ModelBundle(patterns=model.patterns, mlp=model.mlp,
                     config=PatternSetConfig(pattern_spec={2: 3},
                                             semiring="sum-product"),
                     vocab_fingerprint=model.vocab_fingerprint,
                     num_classes=2)
    with pytest.raises(ValueError, match="max semiring"):
        top_k_phrases(sp, docs, vocab, emb, 0, 3)


def test_top_k_pattern_index_bounds():
    model, vocab, emb, docs, _ = trained_micro()
    with pytest.raises(ValueError, match="out of range"):
        top_k_phrases(model, docs, vocab, emb, 3, 2)
    with pytest.raises(ValueError, match="out of range"):
        top_k_phrases(model, docs, vocab, emb, -1, 2)


def test_top_k_sizes_and_order():
    model, vocab, emb, docs, _ = trained_micro()
    report = top_k_phrases(model, docs, vocab, emb, 0, 5)
    assert report.pattern_index == 0
    assert report.pattern_length == 2
    assert len(report.entries) == 5
    scores = [e.score for e in report.entries]
    assert scores == sorted(scores, reverse=True)
    empty = top_k_phrases(model, docs, vocab, emb, 0, 0)
    assert empty.entries == []
    single = top_k_phrases(model, docs[:1], vocab, emb, 0, 5)
    assert len(single.entries) == 1


def test_top_k_ties_order_by_doc_id():
    model, vocab, emb, docs, _ = trained_micro()
    twin_a = TokenizedDocument(token_ids=docs[0].token_ids,
                               raw_tokens=docs[0].raw_tokens, label=0, doc_id=40)
    twin_b = TokenizedDocument(token_ids=docs[0].token_ids,
                               raw_tokens=docs[0].raw_tokens, label=0, doc_id=41)
    report = top_k_phrases(model, [twin_b, twin_a], vocab, emb, 1, 2)
    assert [e.doc_id for e in report.entries] == [40, 41]
    assert report.entries[0].score == report.entries[1].score


def test_phrase_score_is_the_span_score():
    model, vocab, emb, docs, _ = trained_micro()
    for p in range(model.num_patterns):
        report = top_k_phrases(model, docs, vocab, emb, p, 3)
        for e in report.entries:
            doc = next(d for d in docs if d.doc_id == e.doc_id)
            span = emb.doc_matrix(doc)[e.start - 1:e.end]
            assert e.score == dense_span_score(model.patterns[p], span,
                                               model.config)


def test_phrase_tokens_come_from_the_document():
    model, vocab, emb, docs, _ = trained_micro()
    report = top_k_phrases(model, docs, vocab, emb, 0, 4)
    for e in report.entries:
        doc = next(d for d in docs if d.doc_id == e.doc_id)
        consumed = [s["token"] for s in e.steps if s["token"] is not None]
        assert consumed == doc.raw_tokens[e.start - 1:e.end]


# -- contributions -----------------------------------------------------------

def test_contributions_match_manual_leave_one_out():
    model, vocab, emb, docs, _ = trained_micro()
    doc = docs[0]
    report = pattern_contributions(model, doc, vocab, emb, top_n=3)
    z = encode_document(model.patterns, doc, emb, model.config)
    probs = mlp_probabilities(model.mlp, z)
    c = int(probs.argmax())
    assert report.predicted_label == c
    assert report.predicted_probability == float(probs[c])
    for p in range(model.num_patterns):
        z0 = z.copy()
        z0[p] = 0.0
        expect = float(probs[c]) - float(mlp_probabilities(model.mlp, z0)[c])
        assert report.contributions[p] == expect
    ranked = sorted(range(3), key=lambda p: -report.contributions[p])
    assert [e.pattern_index for e in report.top] == ranked


def test_disconnected_pattern_contributes_exactly_zero():
    model, vocab, emb, docs, _ = trained_micro()
    mlp = MlpParams(w1=model.mlp.w1.copy(), b1=model.mlp.b1,
                    w2=model.mlp.w2, b2=model.mlp.b2)
    mlp.w1[1, :] = 0.0  # sever pattern 1 from the MLP
    cut = ModelBundle(patterns=model.patterns, mlp=mlp, config=model.config,
                      vocab_fingerprint=model.vocab_fingerprint,
                      num_classes=model.num_classes)
    report = pattern_contributions(cut, docs[0], vocab, emb)
    assert report.contributions[1] == 0.0


def test_contribution_phrases_align_with_top_k():
    model, vocab, emb, docs, _ = trained_micro()
    report = pattern_contributions(model, docs[2], vocab, emb, top_n=3)
    for entry in report.top:
        if entry.phrase is None:
            continue
        solo = top_k_phrases(model, [docs[2]], vocab, emb,
                             entry.pattern_index, 1)
        assert solo.entries[0] == entry.phrase


def test_contribution_top_n_zero():
    model, vocab, emb, docs, _ = trained_micro()
    report = pattern_contributions(model, docs[0], vocab, emb, top_n=0)
    assert report.top == []
    assert len(report.contributions) == model.num_patterns


# -- rendering ---------------------------------------------------------------

def sample_pattern_report():
    steps = [{"kind": MAIN, "token": "big", "state": 1},
             {"kind": SELF_LOOP, "token": "bad", "state": 1},
             {"kind": EPSILON, "token": None, "state": 2}]
    entry = PhraseEntry(doc_id=3, start=2, end=3, score=1.25, steps=steps)
    return PatternReport(pattern_index=1, pattern_length=2, entries=[entry])


def test_pattern_plain_text_format():
    text = render_report(sample_pattern_report(), "plain-text")
    assert text == ("pattern 1 (length 2)\n"
                    "  1.250000  doc 3  span 2..3: big bad_SL ε\n")


def test_contribution_plain_text_format():
    phrase = PhraseEntry(doc_id=5, start=1, end=1, score=0.5,
                         steps=[{"kind": MAIN, "token": "hello", "state": 1}])
    report = ContributionReport(
        doc_id=5, predicted_label=1, predicted_probability=0.87252,
        contributions=[0.1, -0.05],
        top=[ContributionEntry(pattern_index=0, contribution=0.1, phrase=phrase),
             ContributionEntry(pattern_index=1, contribution=-0.05, phrase=None)])
    text = render_report(report, "plain-text")
    assert text == ("doc 5: predicted class 1 (p=0.8725)\n"
                    "  pattern 0  +0.100000  span 1..1: hello\n"
                    "  pattern 1  -0.050000\n")


def test_structured_round_trip_pattern_report():
    report = sample_pattern_report()
    text = render_report(report, "structured")
    assert parse_structured(text) == report


def test_structured_round_trip_contribution_report():
    model, vocab, emb, docs, _ = trained_micro()
    report = pattern_contributions(model, docs[1], vocab, emb, top_n=2)
    text = render_report(report, "structured")
    assert parse_structured(text) == report


def test_structured_lines_are_json():
    import json
    model, vocab, emb, docs, _ = trained_micro()
    report = top_k_phrases(model, docs, vocab, emb, 0, 3)
    lines = render_report(report, "structured").splitlines()
    assert json.loads(lines[0])["type"] == "pattern_report"
    assert all(json.loads(l)["type"] == "phrase" for l in lines[1:])


def test_render_unknown_format():
    with pytest.raises(ValueError, match="unknown report format"):
        render_report(sample_pattern_report(), "yaml")


def test_parse_structured_rejects_garbage():
    with pytest.raises(ValueError, match="empty report"):
        parse_structured("")
    with pytest.raises(ValueError, match="unknown report record type"):
        parse_structured('{"type": "mystery"}')
