"""Datasets, vocabularies and the synthetic template corpus."""

from __future__ import annotations

import json
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Iterator, Sequence

import numpy as np

from .ast import (
    AstError, AstNode, DepthUnsatisfiable, SexprSyntaxError, parse_sexpr, random_ast, to_sexpr,
)
from .grammar import AsdlGrammar, Cardinality
from .transition import (
    ActionSequence,
    ActionTree,
    AlignmentMap,
    GenToken,
    Order,
    alignment_from_sequences,
    build_action_tree,
    linearize,
)

PAD, UNK, SOS = "<pad>", "<unk>", "<sos>"

BUCKETS = ((1, 10), (11, 20), (21, 30), (31, 40), (41, None))


def bucket_of(size: int) -> int:
    for i, (lo, hi) in enumerate(BUCKETS):
        if size >= lo and (hi is None or size <= hi):
            return i
    raise ValueError(f"AST size must be positive, got {size}")


def bucket_label(i: int) -> str:
    lo, hi = BUCKETS[i]
    return f"[{lo},{hi}]" if hi is not None else f"[{lo},inf)"


class DatasetError(Exception):
    pass


class MalformedLine(DatasetError):
    def __init__(self, line: int, detail: str):
        super().__init__(f"line {line}: {detail}")
        self.line = line


class ValidationFailed(DatasetError):
    def __init__(self, line: int, detail: str):
        super().__init__(f"line {line}: {detail}")
        self.line = line


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    reserved: tuple[str, ...] = (PAD, UNK, SOS)
    min_freq: int = 1

    def __post_init__(self):
        if UNK not in self.tokens:
            raise ValueError("vocabulary must contain <unk>")
        object.__setattr__(self, "_ids", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def build(cls, counts: Counter, min_freq: int = 1,
              reserved: Sequence[str] = (PAD, UNK, SOS)) -> "Vocabulary":
        kept = sorted((t for t, n in counts.items() if n >= min_freq and t not in reserved),
                      key=lambda t: (-counts[t], t))
        return cls(tuple(reserved) + tuple(kept), tuple(reserved), min_freq)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids and token not in self.reserved

    @property
    def unk_id(self) -> int:
        return self._ids[UNK]

    def id(self, token: str) -> int:
        return self._ids.get(token, self._ids[UNK])

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "reserved": list(self.reserved),
                "min_freq": self.min_freq}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(tuple(d["tokens"]), tuple(d["reserved"]), d.get("min_freq", 1))


@dataclass(eq=False)
class Example:
    utterance: tuple[str, ...]
    ast: AstNode
    grammar: AsdlGrammar = field(repr=False)
    multi_token: bool = False

    @cached_property
    def tree(self) -> ActionTree:
        return build_action_tree(self.ast, self.grammar, self.multi_token)

    @cached_property
    def sexpr(self) -> str:
        return to_sexpr(self.ast)

    def sequence(self, order: Order | str) -> ActionSequence:
        order = Order.parse(order)
        cache = self.__dict__.setdefault("_sequences", {})
        if order not in cache:
            cache[order] = linearize(self.tree, self.grammar, order)
        return cache[order]

    @cached_property
    def alignment(self) -> AlignmentMap:
        return alignment_from_sequences(self.sequence(Order.PRE), self.sequence(Order.BFS))

    @property
    def size(self) -> int:
        return len(self.tree)

    def to_json(self) -> dict:
        return {"utterance": list(self.utterance), "ast": self.sexpr}

    def __eq__(self, other) -> bool:
        if not isinstance(other, Example):
            return NotImplemented
        return self.utterance == other.utterance and self.ast == other.ast


@dataclass
class Dataset:
    examples: list[Example]
    split: str = "train"

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self) -> Iterator[Example]:
        return iter(self.examples)

    def __getitem__(self, i: int) -> Example:
        return self.examples[i]

    def permutation(self, rng: np.random.Generator) -> list[int]:
        return [int(i) for i in rng.permutation(len(self.examples))]

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        order = self.permutation(rng) if rng is not None else list(range(len(self)))
        for start in range(0, len(order), batch_size):
            yield [self.examples[i] for i in order[start:start + batch_size]]


_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Whitespace plus punctuation split."""
    return _TOKEN_RE.findall(text)


def load_dataset(path, grammar: AsdlGrammar, split: str = "train", tokenize_text: bool = False,
                 multi_token: bool = False) -> Dataset:
    examples = []
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                utt = record["utterance"]
                sexpr = record["ast"]
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise MalformedLine(n, f"bad JSON record ({e})") from None
            if isinstance(utt, str):
                if not tokenize_text:
                    raise MalformedLine(n, "utterance must be a token list")
                utt = tokenize(utt)
            if not isinstance(utt, list) or not all(isinstance(t, str) for t in utt):
                raise MalformedLine(n, "utterance must be a list of strings")
            try:
                ast = parse_sexpr(sexpr, grammar, multi_token=multi_token)
            except SexprSyntaxError as e:
                raise MalformedLine(n, str(e)) from None
            except AstError as e:
                raise ValidationFailed(n, str(e)) from None
            ex = Example(tuple(utt), ast, grammar, multi_token)
            ex.sequence(Order.PRE)
            ex.sequence(Order.BFS)
            examples.append(ex)
    return Dataset(examples, split)


def write_dataset(path, dataset: Dataset | Sequence[Example]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in dataset:
            f.write(json.dumps(ex.to_json(), ensure_ascii=False) + "\n")


def gold_tokens(ex: Example) -> Iterator[str]:
    for step in ex.sequence(Order.PRE).steps:
        if isinstance(step.action, GenToken):
            yield step.action.token


def build_vocab(dataset: Dataset, min_freq: int = 1) -> tuple[Vocabulary, Vocabulary]:
    """Source-token vocabulary and the GenToken target vocabulary from a training split."""
    src = Counter(t for ex in dataset for t in ex.utterance)
    gen = Counter(t for ex in dataset for t in gold_tokens(ex))
    return (Vocabulary.build(src, min_freq),
            Vocabulary.build(gen, min_freq, reserved=(UNK,)))


# -- synthetic corpus ---------------------------------------------------------------

DEFAULT_TOKENS = (
    "six", "PY3", "os", "path", "sys", "argv", "x", "y", "foo", "bar", "self", "data",
    "items", "value", "key", "result", "name", "line", "lstrip", "join",
)


def default_template(ctor, g: AsdlGrammar) -> str:
    """Prefix template: constructor keyword, then fields; lists are bracketed."""
    parts = [ctor.name.lower()]
    for f in ctor.fields:
        if f.cardinality is Cardinality.SINGLE:
            parts.append("{" + f.name + "}")
        else:
            parts.append("[ {" + f.name + "} ]")
    return " ".join(parts)


def render_utterance(ast: AstNode, g: AsdlGrammar, rules: dict | None = None,
                     separator: str = ",") -> list[str]:
    rules = rules or {}
    template = rules.get(ast.constructor.name) or default_template(ast.constructor, g)
    slots = {}
    for f, value in zip(ast.constructor.fields, ast.field_values):
        rendered = []
        for i, item in enumerate(value):
            if i:
                rendered.append(separator)
            if isinstance(item, AstNode):
                rendered.extend(render_utterance(item, g, rules, separator))
            else:
                rendered.append(item)
        slots[f.name] = rendered
    out: list[str] = []
    for piece in template.split():
        m = re.fullmatch(r"\{(\w+)\}", piece)
        if m:
            if m.group(1) not in slots:
                raise KeyError(f"template for {ast.constructor.name} names unknown field {m.group(1)}")
            out.extend(slots[m.group(1)])
        else:
            out.append(piece)
    return out


def generate_toy_corpus(grammar: AsdlGrammar, size: int, seed: int,
                        template_rules: dict | None = None,
                        token_pool: Sequence[str] = DEFAULT_TOKENS,
                        max_depth: int = 6, max_children: int = 2,
                        max_tries: int = 200) -> Dataset:
    """Sample ``size`` (utterance, AST) pairs whose utterances determine their ASTs.

    Targets cycle through the first three size buckets so the sample spans them.
    """
    rng = np.random.default_rng(seed)
    examples = []
    targets = BUCKETS[:3]
    for i in range(size):
        lo, hi = targets[i % len(targets)]
        best, best_gap = None, None
        for _ in range(max_tries):
            depth = int(rng.integers(1, max_depth + 1))
            try:
                ast = random_ast(grammar, rng, depth, token_pool, max_children=max_children)
            except DepthUnsatisfiable:
                continue
            n = len(build_action_tree(ast, grammar))
            gap = 0 if lo <= n <= (hi or n) else min(abs(n - lo), abs(n - (hi or n)))
            if best is None or gap < best_gap:
                best, best_gap = ast, gap
            if gap == 0:
                break
        if best is None:
            best = random_ast(grammar, rng, max_depth, token_pool, max_children=max_children)
        utt = render_utterance(best, grammar, template_rules)
        examples.append(Example(tuple(utt), best, grammar))
    return Dataset(examples, "train")


def write_toy_splits(grammar: AsdlGrammar, out_dir, size: int, seed: int,
                     template_rules: dict | None = None, valid_size: int | None = None,
                     test_size: int | None = None, **kwargs) -> dict[str, str]:
    """Write ``train``/``valid``/``test`` JSONL files; returns split -> path."""
    os.makedirs(out_dir, exist_ok=True)
    sizes = {
        "train": size,
        "valid": size // 5 if valid_size is None else valid_size,
        "test": size // 5 if test_size is None else test_size,
    }
    seeds = np.random.SeedSequence(seed).spawn(3)
    paths = {}
    for (split, n), ss in zip(sizes.items(), seeds):
        ds = generate_toy_corpus(grammar, n, int(ss.generate_state(1)[0]), template_rules, **kwargs)
        path = os.path.join(out_dir, f"{split}.jsonl")
        write_dataset(path, ds)
        paths[split] = path
    return paths
