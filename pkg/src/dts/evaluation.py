"""Exact-match evaluation, size-bucketed reports, lambda sweeps and run aggregation."""

from __future__ import annotations

import copy
import csv
import io
import json
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from typing import Sequence

import numpy as np

from .ast import AstNode, to_sexpr
from .corpus import BUCKETS, Dataset, bucket_label, bucket_of
from .grammar import AsdlGrammar
from .model import MaxStepsExceeded, Seq2TreeModel
from .train import GrammarHashMismatch, TrainConfig, train
from .transition import Order

SWEEP_HEADER = ("lambda", "acc_a", "acc_b", "mean")
DEFAULT_LAMBDAS = (0.0, 0.25, 0.5, 0.75, 1.0)


def exact_match(pred: AstNode | None, gold: AstNode) -> bool:
    """Canonical s-expressions are byte-identical."""
    return pred is not None and to_sexpr(pred) == to_sexpr(gold)


@dataclass
class BucketStats:
    label: str
    lo: int
    hi: int | None
    count: int = 0
    correct: int = 0

    @property
    def accuracy(self) -> float | None:
        return self.correct / self.count if self.count else None


@dataclass
class Verdict:
    index: int
    size: int
    bucket: str
    match: bool
    prediction: str | None
    error: str | None = None


@dataclass
class EvalReport:
    total: int
    correct: int
    buckets: list[BucketStats]
    verdicts: list[Verdict]
    meta: dict = field(default_factory=dict)

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0

    def bucket_weighted_accuracy(self) -> Fraction:
        """Bucket accuracies weighted by bucket size, as an exact fraction."""
        if not self.total:
            return Fraction(0)
        return sum((Fraction(b.correct, b.count) * b.count for b in self.buckets if b.count),
                   Fraction(0)) / self.total

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "total": self.total,
            "correct": self.correct,
            "buckets": [dict(asdict(b), accuracy=b.accuracy) for b in self.buckets],
            "verdicts": [asdict(v) for v in self.verdicts],
            "meta": self.meta,
        }

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    def table(self) -> str:
        lines = [f"accuracy {self.accuracy:.4f} ({self.correct}/{self.total})"]
        for b in self.buckets:
            acc = "-" if b.accuracy is None else f"{b.accuracy:.4f}"
            lines.append(f"{b.label:>10}  {b.count:5d}  {acc}")
        return "\n".join(lines)


def empty_buckets() -> list[BucketStats]:
    return [BucketStats(bucket_label(i), lo, hi) for i, (lo, hi) in enumerate(BUCKETS)]


def evaluate(model: Seq2TreeModel, dataset: Dataset, order: Order | str | None = None,
             beam_width: int = 5, max_steps: int = 200) -> EvalReport:
    """Decode every example; decoding failures count as non-matches."""
    for ex in dataset:
        if ex.grammar is not model.grammar and ex.grammar.digest() != model.grammar.digest():
            raise GrammarHashMismatch("dataset grammar differs from the model's")
    decoder = model
    if order is not None and Order.parse(order) is not model.order:
        decoder = copy.copy(model)
        decoder.order = Order.parse(order)
    buckets = empty_buckets()
    verdicts = []
    correct = 0
    for i, ex in enumerate(dataset):
        pred, error = None, None
        try:
            pred = decoder.beam_decode(ex.utterance, beam_width, max_steps)
        except MaxStepsExceeded as e:
            error = str(e)
        ok = exact_match(pred, ex.ast)
        b = bucket_of(ex.size)
        buckets[b].count += 1
        buckets[b].correct += ok
        correct += ok
        verdicts.append(Verdict(i, ex.size, buckets[b].label, ok,
                                None if pred is None else to_sexpr(pred), error))
    meta = {"order": decoder.order.value, "beam_width": beam_width, "split": dataset.split}
    return EvalReport(len(dataset), correct, buckets, verdicts, meta)


# -- multi-run and sweeps -------------------------------------------------------------


def aggregate(values: Sequence[float]) -> dict:
    """Mean with both dispersion readings: sample std and max-min spread."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise ValueError("nothing to aggregate")
    return {
        "n": int(arr.size),
        "mean": float(arr.mean()),
        "std": float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
        "spread": float(arr.max() - arr.min()),
        "min": float(arr.min()),
        "max": float(arr.max()),
        "values": [float(v) for v in arr],
    }


def run_seeds(seed: int, runs: int) -> list[int]:
    """Per-run seeds derived from one master seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(runs)]


@dataclass
class SweepRow:
    lam: float
    acc_a: float
    acc_b: float | None

    @property
    def mean(self) -> float:
        accs = [a for a in (self.acc_a, self.acc_b) if a is not None]
        return sum(accs) / len(accs)


def lambda_sweep(train_set: Dataset, valid_set: Dataset, grammar: AsdlGrammar,
                 config: TrainConfig, values: Sequence[float] = DEFAULT_LAMBDAS,
                 out_csv=None) -> list[SweepRow]:
    """Train once per lambda value and report best validation accuracy of each model."""
    if not values:
        raise ValueError("no lambda values given")
    rows = []
    for lam in values:
        res = train(train_set, valid_set, grammar, replace(config, lam=float(lam)))
        acc_b = res.checkpoint_b.meta["val_acc"] if res.checkpoint_b is not None else None
        rows.append(SweepRow(float(lam), res.checkpoint_a.meta["val_acc"], acc_b))
    if out_csv is not None:
        with open(out_csv, "w", encoding="utf-8", newline="") as f:
            f.write(sweep_csv(rows))
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in rows:
        w.writerow([f"{r.lam:g}", f"{r.acc_a:.6f}",
                    "" if r.acc_b is None else f"{r.acc_b:.6f}", f"{r.mean:.6f}"])
    return buf.getvalue()
