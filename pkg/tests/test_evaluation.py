import csv
import io
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dts.ast import parse_sexpr
from dts.corpus import Dataset, bucket_of, build_vocab, generate_toy_corpus
from dts.evaluation import (
    SWEEP_HEADER,
    EvalReport,
    SweepRow,
    aggregate,
    empty_buckets,
    evaluate,
    exact_match,
    lambda_sweep,
    run_seeds,
    sweep_csv,
)
from dts.model import MaxStepsExceeded, build_model
from dts.numerics import OptimizerConfig
from dts.train import GrammarHashMismatch, TrainConfig
from dts.transition import Order

from conftest import IF_PASS_SEXPR, tiny_config


class ScriptedModel:
    """Stands in for a parser: answers from a lookup table."""

    def __init__(self, grammar, answers):
        self.grammar = grammar
        self.order = Order.PRE
        self.answers = answers

    def beam_decode(self, utterance, beam_width, max_steps):
        ans = self.answers[tuple(utterance)]
        if ans is None:
            raise MaxStepsExceeded("scripted failure")
        return ans


def test_exact_match(mini, if_pass_ast):
    assert exact_match(parse_sexpr(IF_PASS_SEXPR, mini), if_pass_ast)
    assert not exact_match(parse_sexpr("(Pass)", mini), if_pass_ast)
    assert not exact_match(None, if_pass_ast)


def test_evaluate_counts_and_buckets(python_grammar, python_corpus):
    answers = {}
    for i, ex in enumerate(python_corpus):
        answers[ex.utterance] = ex.ast if i % 3 == 0 else (None if i % 3 == 1 else
                                                           parse_sexpr("(Pass)", python_grammar))
    report = evaluate(ScriptedModel(python_grammar, answers), python_corpus)
    expected = sum(ans is not None and ans == ex.ast
                   for ex, ans in ((e, answers[e.utterance]) for e in python_corpus))
    assert report.correct == expected and report.total == len(python_corpus)
    assert sum(b.count for b in report.buckets) == report.total
    assert report.bucket_weighted_accuracy() == Fraction(report.correct, report.total)
    failures = [v for v in report.verdicts if v.error]
    assert failures and all(not v.match and v.prediction is None for v in failures)
    for v, ex in zip(report.verdicts, python_corpus):
        assert v.size == ex.size and v.bucket == report.buckets[bucket_of(ex.size)].label
    assert "accuracy" in report.table()
    assert report.to_dict()["total"] == report.total


def test_evaluate_rejects_foreign_data(python_grammar, mini):
    foreign = generate_toy_corpus(mini, 2, 0)
    with pytest.raises(GrammarHashMismatch):
        evaluate(ScriptedModel(python_grammar, {}), foreign)


def test_evaluate_real_model(python_grammar, python_corpus):
    model = build_model(python_grammar, *build_vocab(python_corpus), tiny_config(), "bfs", 0)
    report = evaluate(model, python_corpus, beam_width=2, max_steps=30)
    assert report.total == len(python_corpus)
    assert report.meta["order"] == "bfs"
    other = evaluate(model, python_corpus, order="pre", beam_width=1, max_steps=30)
    assert other.meta["order"] == "pre" and model.order is Order.BFS


def test_empty_dataset(python_grammar):
    report = evaluate(ScriptedModel(python_grammar, {}), Dataset([], "test"))
    assert report.total == 0 and report.accuracy == 0.0
    assert report.bucket_weighted_accuracy() == 0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 80), st.booleans()), min_size=1, max_size=60))
def test_bucket_weighting_recovers_overall_accuracy(items):
    buckets = empty_buckets()
    for size, ok in items:
        b = buckets[bucket_of(size)]
        b.count += 1
        b.correct += ok
    correct = sum(ok for _, ok in items)
    report = EvalReport(len(items), correct, buckets, [])
    assert report.bucket_weighted_accuracy() == Fraction(correct, len(items))


def test_aggregate():
    agg = aggregate([0.80, 0.82, 0.84])
    assert agg["mean"] == pytest.approx(0.82)
    assert agg["std"] == pytest.approx(0.02)
    assert agg["spread"] == pytest.approx(0.04)
    assert aggregate([0.5])["std"] == 0.0
    with pytest.raises(ValueError):
        aggregate([])


def test_run_seeds():
    assert run_seeds(1, 4) == run_seeds(1, 4)
    assert len(set(run_seeds(1, 4))) == 4


def test_sweep_csv_format():
    text = sweep_csv([SweepRow(0.0, 0.5, 0.7), SweepRow(0.25, 1.0, None)])
    rows = list(csv.reader(io.StringIO(text)))
    assert tuple(rows[0]) == SWEEP_HEADER
    assert rows[1] == ["0", "0.500000", "0.700000", "0.600000"]
    assert rows[2] == ["0.25", "1.000000", "", "1.000000"]


def test_lambda_sweep(tmp_path, python_grammar, python_corpus):
    cfg = TrainConfig(epochs=1, batch_size=6, model=tiny_config(), optimizer=OptimizerConfig(lr=0.01))
    rows = lambda_sweep(python_corpus, python_corpus, python_grammar, cfg, (0.0, 0.5),
                        tmp_path / "sweep.csv")
    assert [r.lam for r in rows] == [0.0, 0.5]
    assert all(0 <= r.acc_a <= 1 and 0 <= r.acc_b <= 1 for r in rows)
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0] == ",".join(SWEEP_HEADER) and len(lines) == 3
    assert np.isclose(rows[1].mean, (rows[1].acc_a + rows[1].acc_b) / 2)
    with pytest.raises(ValueError):
        lambda_sweep(python_corpus, python_corpus, python_grammar, cfg, ())
