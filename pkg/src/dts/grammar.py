"""ASDL grammar parsing, rendering and the closed action vocabulary.

Grammar source format::

    # comment
    primitive identifier, string
    root stmt
    stmt = If(expr test, stmt* body, stmt* orelse)
         | Pass
    expr = Name(identifier id)

Only the constructor / field / cardinality subset of ASDL is supported.
"""

from __future__ import annotations

import enum
import hashlib
import re
from dataclasses import dataclass


class GrammarError(Exception):
    pass


class GrammarSyntaxError(GrammarError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{message} at line {line}, column {col}")
        self.line = line
        self.col = col


class UnknownType(GrammarError):
    def __init__(self, name: str):
        super().__init__(f"unknown type {name!r}")
        self.name = name


class DuplicateConstructor(GrammarError):
    def __init__(self, name: str):
        super().__init__(f"duplicate constructor {name!r}")
        self.name = name


class EmptyGrammar(GrammarError):
    def __init__(self):
        super().__init__("grammar declares no composite types")


class PrimitiveTypeQueried(GrammarError):
    def __init__(self, name: str):
        super().__init__(f"{name!r} is a primitive type and has no constructors")
        self.name = name


class Cardinality(enum.Enum):
    SINGLE = ""
    OPTIONAL = "?"
    MULTIPLE = "*"


@dataclass(frozen=True)
class Field:
    name: str
    type: str
    cardinality: Cardinality = Cardinality.SINGLE

    def __str__(self) -> str:
        return f"{self.type}{self.cardinality.value} {self.name}"


@dataclass(frozen=True)
class Constructor:
    name: str
    result_type: str
    fields: tuple[Field, ...] = ()

    def __str__(self) -> str:
        if not self.fields:
            return self.name
        return f"{self.name}({', '.join(str(f) for f in self.fields)})"


@dataclass(frozen=True)
class AsdlGrammar:
    primitive_types: tuple[str, ...]
    type_defs: tuple[tuple[str, tuple[Constructor, ...]], ...]
    root_type: str

    def __post_init__(self):
        # lookup tables; the dataclass itself stays immutable
        object.__setattr__(self, "_types", dict(self.type_defs))
        object.__setattr__(
            self, "_ctors", {c.name: c for _, cs in self.type_defs for c in cs}
        )

    @property
    def composite_types(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.type_defs)

    @property
    def constructors(self) -> tuple[Constructor, ...]:
        return tuple(c for _, cs in self.type_defs for c in cs)

    def is_primitive(self, type_name: str) -> bool:
        return type_name in self.primitive_types

    def is_composite(self, type_name: str) -> bool:
        return type_name in self._types

    def constructor(self, name: str) -> Constructor:
        try:
            return self._ctors[name]
        except KeyError:
            raise GrammarError(f"unknown constructor {name!r}") from None

    def constructors_of(self, type_name: str) -> tuple[Constructor, ...]:
        return constructors_of(self, type_name)

    def render(self) -> str:
        return render(self)

    def digest(self) -> str:
        """Stable hash of the canonical rendering."""
        return hashlib.sha256(render(self).encode("utf-8")).hexdigest()


def constructors_of(g: AsdlGrammar, type_name: str) -> tuple[Constructor, ...]:
    if g.is_primitive(type_name):
        raise PrimitiveTypeQueried(type_name)
    if not g.is_composite(type_name):
        raise UnknownType(type_name)
    return g._types[type_name]


_TOKEN_RE = re.compile(
    r"(?P<ws>[ \t\r\f\v]+)|(?P<comment>#[^\n]*)|(?P<nl>\n)"
    r"|(?P<name>[A-Za-z_][A-Za-z0-9_]*)|(?P<punct>[=|(),?*])"
)


@dataclass
class _Token:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    line, line_start, pos = 1, 0, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise GrammarSyntaxError(
                f"unexpected character {text[pos]!r}", line, pos - line_start + 1
            )
        kind = m.lastgroup
        if kind in ("name", "punct"):
            tokens.append(_Token(kind, m.group(), line, pos - line_start + 1))
        elif kind == "nl":
            line += 1
            line_start = m.end()
        pos = m.end()
    tokens.append(_Token("eof", "", line, pos - line_start + 1))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.pos = 0

    def peek(self, offset: int = 0) -> _Token:
        return self.tokens[min(self.pos + offset, len(self.tokens) - 1)]

    def next(self) -> _Token:
        tok = self.peek()
        self.pos += 1
        return tok

    def expect(self, kind: str, text: str | None = None) -> _Token:
        tok = self.next()
        if tok.kind != kind or (text is not None and tok.text != text):
            want = text if text is not None else kind
            got = tok.text or "end of input"
            raise GrammarSyntaxError(f"expected {want!r}, got {got!r}", tok.line, tok.col)
        return tok

    def at(self, kind: str, text: str | None = None, offset: int = 0) -> bool:
        tok = self.peek(offset)
        return tok.kind == kind and (text is None or tok.text == text)

    def parse(self):
        primitives: list[str] = []
        defs: list[tuple[str, list[tuple[str, list[tuple[str, str, str]]]], _Token]] = []
        root = None
        while not self.at("eof"):
            head = self.expect("name")
            if head.text == "primitive" and not self.at("punct", "="):
                primitives.append(self.expect("name").text)
                while self.at("punct", ","):
                    self.next()
                    primitives.append(self.expect("name").text)
            elif head.text == "root" and not self.at("punct", "="):
                root = self.expect("name")
            else:
                self.expect("punct", "=")
                ctors = [self.constructor()]
                while self.at("punct", "|"):
                    self.next()
                    ctors.append(self.constructor())
                defs.append((head.text, ctors, head))
        return primitives, defs, root

    def constructor(self):
        name = self.expect("name")
        fields = []
        if self.at("punct", "("):
            self.next()
            if not self.at("punct", ")"):
                fields.append(self.field())
                while self.at("punct", ","):
                    self.next()
                    fields.append(self.field())
            self.expect("punct", ")")
        return name, fields

    def field(self):
        type_tok = self.expect("name")
        card = ""
        if self.at("punct", "?") or self.at("punct", "*"):
            card = self.next().text
        name_tok = self.expect("name")
        return type_tok, card, name_tok


def parse_grammar(text: str) -> AsdlGrammar:
    """Parse grammar source into an :class:`AsdlGrammar`."""
    if not text or not text.strip():
        raise EmptyGrammar()
    primitives, defs, root_tok = _Parser(text).parse()
    if not defs:
        raise EmptyGrammar()

    seen_types: set[str] = set(primitives)
    if len(seen_types) != len(primitives):
        dup = next(p for p in primitives if primitives.count(p) > 1)
        raise GrammarError(f"primitive type {dup!r} declared twice")
    for type_name, _, tok in defs:
        if type_name in seen_types:
            raise GrammarSyntaxError(f"type {type_name!r} redefined", tok.line, tok.col)
        seen_types.add(type_name)

    ctor_names: set[str] = set()
    type_defs = []
    for type_name, raw_ctors, _ in defs:
        ctors = []
        for name_tok, raw_fields in raw_ctors:
            if name_tok.text in ctor_names:
                raise DuplicateConstructor(name_tok.text)
            ctor_names.add(name_tok.text)
            fields = []
            field_names: set[str] = set()
            for type_tok, card, fname_tok in raw_fields:
                if type_tok.text not in seen_types:
                    raise UnknownType(type_tok.text)
                if fname_tok.text in field_names:
                    raise GrammarSyntaxError(
                        f"duplicate field {fname_tok.text!r} in {name_tok.text}",
                        fname_tok.line,
                        fname_tok.col,
                    )
                field_names.add(fname_tok.text)
                fields.append(Field(fname_tok.text, type_tok.text, Cardinality(card)))
            ctors.append(Constructor(name_tok.text, type_name, tuple(fields)))
        type_defs.append((type_name, tuple(ctors)))

    if root_tok is not None:
        if root_tok.text not in dict(type_defs):
            raise UnknownType(root_tok.text)
        root = root_tok.text
    else:
        root = type_defs[0][0]
    return AsdlGrammar(tuple(primitives), tuple(type_defs), root)


def render(g: AsdlGrammar) -> str:
    """Pretty-print a grammar; ``parse_grammar(render(g)) == g``."""
    lines = []
    if g.primitive_types:
        lines.append("primitive " + ", ".join(g.primitive_types))
    if g.type_defs[0][0] != g.root_type:
        lines.append(f"root {g.root_type}")
    for type_name, ctors in g.type_defs:
        pad = " " * len(type_name)
        lines.append(f"{type_name} = {ctors[0]}")
        for c in ctors[1:]:
            lines.append(f"{pad} | {c}")
    return "\n".join(lines) + "\n"


def load_grammar(path) -> AsdlGrammar:
    with open(path, encoding="utf-8") as f:
        return parse_grammar(f.read())


@dataclass(frozen=True)
class ActionVocab:
    """Dense ids for the closed action class: one per constructor, then Reduce."""

    constructor_names: tuple[str, ...]

    @classmethod
    def from_grammar(cls, g: AsdlGrammar) -> "ActionVocab":
        return cls(tuple(c.name for c in g.constructors))

    def __post_init__(self):
        object.__setattr__(
            self, "_ids", {n: i for i, n in enumerate(self.constructor_names)}
        )

    @property
    def apply_constr_ids(self) -> dict[str, int]:
        return dict(self._ids)

    @property
    def reduce_id(self) -> int:
        return len(self.constructor_names)

    def __len__(self) -> int:
        return len(self.constructor_names) + 1

    def constructor_id(self, name: str) -> int:
        return self._ids[name]

    def to_dict(self) -> dict:
        return {"constructors": list(self.constructor_names), "reduce_id": self.reduce_id}

    @classmethod
    def from_dict(cls, d: dict) -> "ActionVocab":
        vocab = cls(tuple(d["constructors"]))
        if vocab.reduce_id != d["reduce_id"]:
            raise ValueError("corrupt action vocabulary")
        return vocab


def action_vocabulary(g: AsdlGrammar) -> ActionVocab:
    return ActionVocab.from_grammar(g)
