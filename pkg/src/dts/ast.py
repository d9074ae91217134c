"""Concrete ASTs: validation, the canonical s-expression codec and random generation.

A field value is a tuple. Composite fields hold :class:`AstNode` children,
primitive fields hold token strings; an absent Optional field is ``()``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .grammar import AsdlGrammar, Cardinality, Constructor, GrammarError


class AstError(Exception):
    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{message} at {path or '<root>'}")
        self.path = path


class TypeMismatch(AstError):
    pass


class ArityViolation(AstError):
    pass


class CardinalityViolation(AstError):
    pass


class SexprSyntaxError(Exception):
    def __init__(self, message: str, pos: int):
        super().__init__(f"{message} at offset {pos}")
        self.pos = pos


class DepthUnsatisfiable(Exception):
    pass


@dataclass(frozen=True)
class AstNode:
    constructor: Constructor
    field_values: tuple[tuple, ...] = ()

    @property
    def name(self) -> str:
        return self.constructor.name

    def __getitem__(self, field_name: str) -> tuple:
        for f, v in zip(self.constructor.fields, self.field_values):
            if f.name == field_name:
                return v
        raise KeyError(field_name)

    def __str__(self) -> str:
        return to_sexpr(self)


def make_node(g: AsdlGrammar, ctor_name: str, *values) -> AstNode:
    """Convenience builder: ``make_node(g, "Name", "six")``.

    Single fields take the bare value, Optional fields a value or ``None``,
    Multiple fields a list.
    """
    ctor = g.constructor(ctor_name)
    if len(values) != len(ctor.fields):
        raise ArityViolation(
            f"{ctor_name} takes {len(ctor.fields)} fields, got {len(values)}"
        )
    packed = []
    for field, value in zip(ctor.fields, values):
        if field.cardinality is Cardinality.MULTIPLE:
            packed.append(tuple(value))
        elif value is None:
            packed.append(())
        else:
            packed.append((value,))
    return AstNode(ctor, tuple(packed))


def validate(
    node: AstNode,
    g: AsdlGrammar,
    expected_type: str | None = None,
    multi_token: bool = False,
) -> None:
    """Raise unless ``node`` is a well-formed AST of ``expected_type``."""
    _validate(node, g, expected_type or g.root_type, "", multi_token)


def _validate(node, g: AsdlGrammar, expected_type: str, path: str, multi_token: bool):
    if not isinstance(node, AstNode):
        raise TypeMismatch(f"expected a {expected_type} node, got {node!r}", path)
    ctor = node.constructor
    try:
        known = g.constructor(ctor.name)
    except GrammarError:
        raise TypeMismatch(f"constructor {ctor.name} not in grammar", path) from None
    if known != ctor:
        raise TypeMismatch(f"constructor {ctor.name} differs from the grammar's", path)
    if ctor.result_type != expected_type:
        raise TypeMismatch(
            f"{ctor.name} has type {ctor.result_type}, expected {expected_type}", path
        )
    if len(node.field_values) != len(ctor.fields):
        raise ArityViolation(
            f"{ctor.name} has {len(ctor.fields)} fields, got {len(node.field_values)}",
            path,
        )
    for field, value in zip(ctor.fields, node.field_values):
        fpath = f"{path}/{ctor.name}.{field.name}"
        if not isinstance(value, tuple):
            raise CardinalityViolation(f"field value must be a tuple, got {value!r}", fpath)
        n = len(value)
        primitive = g.is_primitive(field.type)
        if field.cardinality is Cardinality.SINGLE:
            ok = n >= 1 if (primitive and multi_token) else n == 1
        elif field.cardinality is Cardinality.OPTIONAL:
            ok = n <= 1 or (primitive and multi_token)
        else:
            ok = True
        if not ok:
            raise CardinalityViolation(
                f"{field.cardinality.name.lower()} field holds {n} values", fpath
            )
        for i, item in enumerate(value):
            if primitive:
                if not isinstance(item, str):
                    raise TypeMismatch(f"primitive field holds {item!r}", f"{fpath}[{i}]")
            else:
                _validate(item, g, field.type, f"{fpath}[{i}]", multi_token)


def ast_depth(node: AstNode) -> int:
    child_depths = [
        ast_depth(child)
        for value in node.field_values
        for child in value
        if isinstance(child, AstNode)
    ]
    return 1 + max(child_depths, default=0)


# -- s-expression codec ------------------------------------------------------


def _quote(token: str) -> str:
    return '"' + token.replace("\\", "\\\\").replace('"', '\\"') + '"'


def to_sexpr(node: AstNode) -> str:
    """Canonical text: ``(Ctor field ...)``; list/optional fields as ``(list ...)``."""
    parts = [node.constructor.name]
    for field, value in zip(node.constructor.fields, node.field_values):
        items = [_quote(v) if isinstance(v, str) else to_sexpr(v) for v in value]
        if field.cardinality is Cardinality.SINGLE and len(items) == 1:
            parts.append(items[0])
        else:
            parts.append("(" + " ".join(["list"] + items) + ")")
    return "(" + " ".join(parts) + ")"


def _read_sexpr(text: str):
    """Read raw s-expression structure: lists, symbols and ``str`` tokens (tagged)."""
    pos = 0
    n = len(text)

    def skip():
        nonlocal pos
        while pos < n and text[pos].isspace():
            pos += 1

    def read():
        nonlocal pos
        skip()
        if pos >= n:
            raise SexprSyntaxError("unexpected end of input", pos)
        ch = text[pos]
        if ch == "(":
            pos += 1
            items = []
            while True:
                skip()
                if pos >= n:
                    raise SexprSyntaxError("unclosed '('", pos)
                if text[pos] == ")":
                    pos += 1
                    return items
                items.append(read())
        if ch == ")":
            raise SexprSyntaxError("unbalanced ')'", pos)
        if ch == '"':
            pos += 1
            chars = []
            while True:
                if pos >= n:
                    raise SexprSyntaxError("unterminated string", pos)
                c = text[pos]
                if c == "\\":
                    if pos + 1 >= n:
                        raise SexprSyntaxError("dangling escape", pos)
                    chars.append(text[pos + 1])
                    pos += 2
                elif c == '"':
                    pos += 1
                    return _Str("".join(chars))
                else:
                    chars.append(c)
                    pos += 1
        start = pos
        while pos < n and not text[pos].isspace() and text[pos] not in '()"':
            pos += 1
        return _Sym(text[start:pos])

    value = read()
    skip()
    if pos != n:
        raise SexprSyntaxError("trailing input", pos)
    return value


class _Str(str):
    pass


class _Sym(str):
    pass


def parse_sexpr(
    text: str, g: AsdlGrammar, expected_type: str | None = None, multi_token: bool = False
) -> AstNode:
    raw = _read_sexpr(text)
    node = _build(raw, g, expected_type or g.root_type, "")
    validate(node, g, expected_type or g.root_type, multi_token=multi_token)
    return node


def _build(raw, g: AsdlGrammar, expected_type: str, path: str) -> AstNode:
    if not isinstance(raw, list) or not raw or not isinstance(raw[0], _Sym):
        raise SexprSyntaxError(f"expected '(Constructor ...)' at {path or '<root>'}", 0)
    name = str(raw[0])
    try:
        ctor = g.constructor(name)
    except GrammarError:
        raise TypeMismatch(f"unknown constructor {name}", path) from None
    args = raw[1:]
    if len(args) != len(ctor.fields):
        raise ArityViolation(
            f"{name} has {len(ctor.fields)} fields, got {len(args)}", path
        )
    values = []
    for field, arg in zip(ctor.fields, args):
        fpath = f"{path}/{name}.{field.name}"
        if isinstance(arg, list) and arg and arg[0] == "list" and isinstance(arg[0], _Sym):
            items = arg[1:]
        elif field.cardinality is Cardinality.SINGLE:
            items = [arg]
        else:
            raise CardinalityViolation("expected a (list ...) value", fpath)
        converted = []
        for i, item in enumerate(items):
            if g.is_primitive(field.type):
                if not isinstance(item, _Str):
                    raise TypeMismatch("expected a quoted token", f"{fpath}[{i}]")
                converted.append(str(item))
            else:
                converted.append(_build(item, g, field.type, f"{fpath}[{i}]"))
        values.append(tuple(converted))
    return AstNode(ctor, tuple(values))


# -- random generation ---------------------------------------------------------


def min_depths(g: AsdlGrammar) -> dict[str, float]:
    """Smallest achievable AST depth per composite type (``inf`` if none terminates)."""
    depth = {t: float("inf") for t in g.composite_types}
    changed = True
    while changed:
        changed = False
        for t in g.composite_types:
            best = min(_ctor_min_depth(g, c, depth) for c in g.constructors_of(t))
            if best < depth[t]:
                depth[t] = best
                changed = True
    return depth


def _ctor_min_depth(g: AsdlGrammar, ctor: Constructor, depth: dict[str, float]) -> float:
    need = 0.0
    for f in ctor.fields:
        if f.cardinality is Cardinality.SINGLE and g.is_composite(f.type):
            need = max(need, depth[f.type])
    return 1 + need


def random_ast(
    g: AsdlGrammar,
    rng: np.random.Generator,
    max_depth: int,
    token_pool: Sequence[str],
    root_type: str | None = None,
    max_children: int = 3,
) -> AstNode:
    """Sample a valid AST of depth at most ``max_depth``; deterministic given ``rng`` state."""
    if max_depth < 1:
        raise DepthUnsatisfiable("max_depth must be at least 1")
    if not token_pool:
        raise ValueError("token_pool is empty")
    root_type = root_type or g.root_type
    depth = min_depths(g)
    if depth[root_type] > max_depth:
        raise DepthUnsatisfiable(
            f"{root_type} needs depth {depth[root_type]}, only {max_depth} allowed"
        )

    def sample(type_name: str, budget: int) -> AstNode:
        options = [
            c for c in g.constructors_of(type_name) if _ctor_min_depth(g, c, depth) <= budget
        ]
        ctor = options[int(rng.integers(len(options)))]
        values = []
        for f in ctor.fields:
            if g.is_primitive(f.type):
                draw: Callable = lambda: str(token_pool[int(rng.integers(len(token_pool)))])
                fits = True
            else:
                draw = lambda f=f: sample(f.type, budget - 1)
                fits = depth[f.type] <= budget - 1
            if f.cardinality is Cardinality.SINGLE:
                values.append((draw(),))
            elif f.cardinality is Cardinality.OPTIONAL:
                values.append((draw(),) if fits and rng.random() < 0.5 else ())
            else:
                k = int(rng.integers(max_children + 1)) if fits else 0
                values.append(tuple(draw() for _ in range(k)))
        return AstNode(ctor, tuple(values))

    return sample(root_type, max_depth)
