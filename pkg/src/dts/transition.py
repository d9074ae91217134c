"""Transition system: ASTs as action trees, their two linearizations, and parser states.

Timesteps are 0-based in code; rendered output counts from 1.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field as dc_field
from typing import Iterable, Sequence, Union

import numpy as np

from .ast import AstNode, validate
from .grammar import ActionVocab, AsdlGrammar, Cardinality, Field


class Order(enum.Enum):
    PRE = "pre"
    BFS = "bfs"

    @classmethod
    def parse(cls, value: "Order | str") -> "Order":
        if isinstance(value, Order):
            return value
        aliases = {"pre": cls.PRE, "preorder": cls.PRE, "dfs": cls.PRE,
                   "bfs": cls.BFS, "breadth": cls.BFS, "breadthfirst": cls.BFS}
        try:
            return aliases[value.lower().replace("-", "").replace("_", "")]
        except KeyError:
            raise ValueError(f"unknown traversal order {value!r}") from None


# -- actions -----------------------------------------------------------------


@dataclass(frozen=True)
class ApplyConstr:
    constructor: str

    def __str__(self) -> str:
        return f"ApplyConstr[{self.constructor}]"


@dataclass(frozen=True)
class Reduce:
    def __str__(self) -> str:
        return "Reduce"


@dataclass(frozen=True)
class GenToken:
    token: str

    def __str__(self) -> str:
        escaped = self.token.replace("\\", "\\\\").replace('"', '\\"')
        return f'GenToken["{escaped}"]'


Action = Union[ApplyConstr, Reduce, GenToken]
REDUCE = Reduce()


class InvalidAction(Exception):
    def __init__(self, action, frontier):
        super().__init__(f"{action} not permitted at frontier {frontier.field}")
        self.action = action
        self.frontier = frontier


class IncompleteTree(Exception):
    pass


# -- action trees ----------------------------------------------------------------


@dataclass(frozen=True)
class TreeNode:
    action: Action
    parent: int | None
    field_index: int | None
    children: tuple[tuple[int, ...], ...] = ()


@dataclass(frozen=True)
class ActionTree:
    nodes: tuple[TreeNode, ...]
    multi_token: bool = False

    @property
    def root(self) -> int:
        return 0

    def __len__(self) -> int:
        return len(self.nodes)


def build_action_tree(ast: AstNode, g: AsdlGrammar, multi_token: bool = False,
                      root_type: str | None = None) -> ActionTree:
    validate(ast, g, root_type, multi_token=multi_token)
    nodes: list[TreeNode | None] = []

    def add(action, parent, field_index) -> int:
        nodes.append(None)
        idx = len(nodes) - 1
        nodes[idx] = TreeNode(action, parent, field_index)
        return idx

    def visit(node: AstNode, parent, field_index) -> int:
        idx = add(ApplyConstr(node.constructor.name), parent, field_index)
        children = []
        for fi, (f, value) in enumerate(zip(node.constructor.fields, node.field_values)):
            kids = []
            for item in value:
                if isinstance(item, AstNode):
                    kids.append(visit(item, idx, fi))
                else:
                    kids.append(add(GenToken(item), idx, fi))
            if _ends_with_reduce(f, g, multi_token, len(value)):
                kids.append(add(REDUCE, idx, fi))
            children.append(tuple(kids))
        nodes[idx] = TreeNode(nodes[idx].action, parent, field_index, tuple(children))
        return idx

    visit(ast, None, None)
    return ActionTree(tuple(nodes), multi_token)


def _is_token_list(f: Field, g: AsdlGrammar, multi_token: bool) -> bool:
    return multi_token and g.is_primitive(f.type)


def _ends_with_reduce(f: Field, g: AsdlGrammar, multi_token: bool, n_values: int) -> bool:
    # an Optional field is closed by its value, or by Reduce when absent
    if f.cardinality is Cardinality.MULTIPLE or _is_token_list(f, g, multi_token):
        return True
    return f.cardinality is Cardinality.OPTIONAL and n_values == 0


def ast_size(ast: AstNode, g: AsdlGrammar, multi_token: bool = False) -> int:
    """Number of action-tree nodes, i.e. the length of either linearization."""
    return len(build_action_tree(ast, g, multi_token))


# -- linearization -----------------------------------------------------------------

ROOT_FIELD_NAME = "<root>"


@dataclass(frozen=True)
class Step:
    action: Action
    node_index: int
    parent_timestep: int | None
    frontier_field: Field


@dataclass(frozen=True)
class ActionSequence:
    steps: tuple[Step, ...]
    order: Order

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def actions(self) -> list[Action]:
        return [s.action for s in self.steps]


def _field_of(tree: ActionTree, g: AsdlGrammar, idx: int) -> Field:
    node = tree.nodes[idx]
    if node.parent is None:
        ctor = g.constructor(node.action.constructor)
        return Field(ROOT_FIELD_NAME, ctor.result_type, Cardinality.SINGLE)
    parent_ctor = g.constructor(tree.nodes[node.parent].action.constructor)
    return parent_ctor.fields[node.field_index]


def linearize(tree: ActionTree, g: AsdlGrammar, order: Order | str) -> ActionSequence:
    order = Order.parse(order)
    if order is Order.PRE:
        visit_order = _preorder(tree)
    else:
        visit_order = _breadth_first(tree)
    timestep = {idx: t for t, idx in enumerate(visit_order)}
    steps = []
    for idx in visit_order:
        node = tree.nodes[idx]
        parent_t = None if node.parent is None else timestep[node.parent]
        steps.append(Step(node.action, idx, parent_t, _field_of(tree, g, idx)))
    return ActionSequence(tuple(steps), order)


def _preorder(tree: ActionTree) -> list[int]:
    out = []
    stack = [tree.root]
    while stack:
        idx = stack.pop()
        out.append(idx)
        for kids in reversed(tree.nodes[idx].children):
            stack.extend(reversed(kids))
    return out


def _breadth_first(tree: ActionTree) -> list[int]:
    out = [tree.root]
    agenda = deque(tree.nodes[tree.root].children)
    while agenda:
        for idx in agenda.popleft():
            out.append(idx)
            agenda.extend(tree.nodes[idx].children)
    return out


@dataclass(frozen=True)
class AlignmentMap:
    pre_to_bfs: tuple[int, ...]
    bfs_to_pre: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.pre_to_bfs)


def alignment(tree: ActionTree, g: AsdlGrammar) -> AlignmentMap:
    pre = linearize(tree, g, Order.PRE)
    bfs = linearize(tree, g, Order.BFS)
    return alignment_from_sequences(pre, bfs)


def alignment_from_sequences(pre: ActionSequence, bfs: ActionSequence) -> AlignmentMap:
    bfs_t = {s.node_index: t for t, s in enumerate(bfs.steps)}
    pre_to_bfs = tuple(bfs_t[s.node_index] for s in pre.steps)
    bfs_to_pre = [0] * len(pre_to_bfs)
    for t, tb in enumerate(pre_to_bfs):
        bfs_to_pre[tb] = t
    return AlignmentMap(pre_to_bfs, tuple(bfs_to_pre))


def format_sequence(seq: ActionSequence) -> str:
    """One action per line: ``t<TAB>action<TAB>parent_t<TAB>field`` (1-based)."""
    lines = []
    for t, step in enumerate(seq.steps, start=1):
        parent = "-" if step.parent_timestep is None else str(step.parent_timestep + 1)
        lines.append(f"{t}\t{step.action}\t{parent}\t{step.frontier_field}")
    return "\n".join(lines)


# -- parser states --------------------------------------------------------------


class FrontierKind(enum.Enum):
    COMPOSITE = "composite"
    PRIMITIVE = "primitive"


@dataclass
class Frontier:
    field: Field
    kind: FrontierKind
    parent_timestep: int | None
    valid_action_mask: np.ndarray
    token_allowed: bool

    @property
    def reduce_allowed(self) -> bool:
        return bool(self.valid_action_mask[-1])


@dataclass
class _OpenField:
    node: int
    field_index: int
    field: Field
    filled: int = 0


@dataclass
class _PartialNode:
    action: Action
    timestep: int
    children: list[list[int]] = dc_field(default_factory=list)


class ParserState:
    """Decode-time state: a partial tree plus the agenda of open fields.

    The agenda is a LIFO stack for pre-order decoding and a FIFO queue for
    breadth-first decoding; its head is the frontier field.
    """

    def __init__(self, g: AsdlGrammar, root_type: str | None = None,
                 order: Order | str = Order.PRE, vocab: ActionVocab | None = None,
                 multi_token: bool = False):
        self.grammar = g
        self.order = Order.parse(order)
        self.vocab = vocab or ActionVocab.from_grammar(g)
        self.multi_token = multi_token
        self.root_type = root_type or g.root_type
        self.nodes: list[_PartialNode] = []
        self.actions: list[Action] = []
        self._agenda: deque[_OpenField] = deque(
            [_OpenField(-1, 0, Field(ROOT_FIELD_NAME, self.root_type, Cardinality.SINGLE))]
        )
        self._mask_cache: dict = {}

    def copy(self) -> "ParserState":
        new = object.__new__(ParserState)
        new.grammar = self.grammar
        new.order = self.order
        new.vocab = self.vocab
        new.multi_token = self.multi_token
        new.root_type = self.root_type
        new.nodes = [
            _PartialNode(n.action, n.timestep, [list(c) for c in n.children])
            for n in self.nodes
        ]
        new.actions = list(self.actions)
        new._agenda = deque(
            _OpenField(o.node, o.field_index, o.field, o.filled) for o in self._agenda
        )
        new._mask_cache = self._mask_cache
        return new

    @property
    def timestep(self) -> int:
        return len(self.actions)

    def is_complete(self) -> bool:
        return not self._agenda

    def _head(self) -> _OpenField:
        if not self._agenda:
            raise IncompleteTree("no open frontier: the tree is complete")
        return self._agenda[-1] if self.order is Order.PRE else self._agenda[0]

    def _pop_head(self) -> None:
        if self.order is Order.PRE:
            self._agenda.pop()
        else:
            self._agenda.popleft()

    def frontier(self) -> Frontier:
        head = self._head()
        f = head.field
        g = self.grammar
        primitive = g.is_primitive(f.type)
        card = f.cardinality
        if primitive and self.multi_token:
            item_ok = True
            reduce_ok = card is not Cardinality.SINGLE or head.filled >= 1
        elif card is Cardinality.MULTIPLE:
            reduce_ok, item_ok = True, True
        elif card is Cardinality.OPTIONAL:
            reduce_ok = item_ok = head.filled == 0
        else:
            reduce_ok, item_ok = False, head.filled == 0
        key = (f.type, primitive, reduce_ok, item_ok)
        mask = self._mask_cache.get(key)
        if mask is None:
            mask = np.zeros(len(self.vocab), dtype=bool)
            if not primitive and item_ok:
                for c in g.constructors_of(f.type):
                    mask[self.vocab.constructor_id(c.name)] = True
            mask[self.vocab.reduce_id] = reduce_ok
            mask.setflags(write=False)
            self._mask_cache[key] = mask
        parent_t = None if head.node < 0 else self.nodes[head.node].timestep
        kind = FrontierKind.PRIMITIVE if primitive else FrontierKind.COMPOSITE
        return Frontier(f, kind, parent_t, mask, primitive and item_ok)

    def is_valid(self, action: Action, frontier: Frontier | None = None) -> bool:
        fr = frontier or self.frontier()
        if isinstance(action, Reduce):
            return fr.reduce_allowed
        if isinstance(action, GenToken):
            return fr.token_allowed
        if isinstance(action, ApplyConstr) and fr.kind is FrontierKind.COMPOSITE:
            try:
                return bool(fr.valid_action_mask[self.vocab.constructor_id(action.constructor)])
            except KeyError:
                return False
        return False

    def apply(self, action: Action) -> "ParserState":
        fr = self.frontier()
        if not self.is_valid(action, fr):
            raise InvalidAction(action, fr)
        head = self._head()
        t = len(self.actions)
        self.actions.append(action)
        if isinstance(action, Reduce):
            self.nodes.append(_PartialNode(action, t))
            self._attach(head, len(self.nodes) - 1)
            self._pop_head()
            return self

        new_fields = []
        if isinstance(action, ApplyConstr):
            ctor = self.grammar.constructor(action.constructor)
            self.nodes.append(_PartialNode(action, t, [[] for _ in ctor.fields]))
            idx = len(self.nodes) - 1
            new_fields = [_OpenField(idx, fi, f) for fi, f in enumerate(ctor.fields)]
        else:
            self.nodes.append(_PartialNode(action, t))
            idx = len(self.nodes) - 1
        self._attach(head, idx)
        head.filled += 1
        if head.field.cardinality is not Cardinality.MULTIPLE and not _is_token_list(
            head.field, self.grammar, self.multi_token
        ):
            self._pop_head()
        if self.order is Order.PRE:
            self._agenda.extend(reversed(new_fields))
        else:
            self._agenda.extend(new_fields)
        return self

    def _attach(self, head: _OpenField, idx: int) -> None:
        if head.node >= 0:
            self.nodes[head.node].children[head.field_index].append(idx)

    def extract_ast(self) -> AstNode:
        if not self.is_complete():
            raise IncompleteTree(f"{len(self._agenda)} fields still open")
        return self._extract(0)

    def _extract(self, idx: int) -> AstNode:
        node = self.nodes[idx]
        ctor = self.grammar.constructor(node.action.constructor)
        values = []
        for kids in node.children:
            items = []
            for k in kids:
                a = self.nodes[k].action
                if isinstance(a, GenToken):
                    items.append(a.token)
                elif isinstance(a, ApplyConstr):
                    items.append(self._extract(k))
            values.append(tuple(items))
        return AstNode(ctor, tuple(values))


def init_state(g: AsdlGrammar, root_type: str | None = None, order: Order | str = Order.PRE,
               vocab: ActionVocab | None = None, multi_token: bool = False) -> ParserState:
    return ParserState(g, root_type, order, vocab, multi_token)


def apply_action(state: ParserState, action: Action) -> ParserState:
    return state.apply(action)


def frontier(state: ParserState) -> Frontier:
    return state.frontier()


def is_complete(state: ParserState) -> bool:
    return state.is_complete()


def extract_ast(state: ParserState) -> AstNode:
    return state.extract_ast()


def replay(g: AsdlGrammar, actions: Iterable[Action], order: Order | str,
           root_type: str | None = None, multi_token: bool = False) -> ParserState:
    state = ParserState(g, root_type, order, multi_token=multi_token)
    for a in actions:
        state.apply(a)
    return state


def to_actions(ast: AstNode, g: AsdlGrammar, order: Order | str, multi_token: bool = False,
               root_type: str | None = None) -> list[Action]:
    return linearize(build_action_tree(ast, g, multi_token, root_type), g, order).actions


def parse_action(text: str) -> Action:
    """Inverse of ``str(action)``."""
    text = text.strip()
    if text == "Reduce":
        return REDUCE
    if text.startswith("ApplyConstr[") and text.endswith("]"):
        return ApplyConstr(text[len("ApplyConstr["):-1])
    if text.startswith('GenToken["') and text.endswith('"]'):
        body = text[len('GenToken["'):-2]
        out, i = [], 0
        while i < len(body):
            if body[i] == "\\" and i + 1 < len(body):
                out.append(body[i + 1])
                i += 2
            else:
                out.append(body[i])
                i += 1
        return GenToken("".join(out))
    raise ValueError(f"cannot parse action {text!r}")


def sequence_frontiers(seq: ActionSequence, g: AsdlGrammar, vocab: ActionVocab | None = None,
                       multi_token: bool = False) -> list[Frontier]:
    """Replay ``seq`` and collect the frontier seen before each step."""
    state = ParserState(g, None, seq.order, vocab, multi_token)
    out = []
    for step in seq.steps:
        fr = state.frontier()
        out.append(fr)
        state.apply(step.action)
    if not state.is_complete():
        raise IncompleteTree("sequence ended with open fields")
    return out


def check_parent_precedence(seq: ActionSequence) -> bool:
    return all(
        s.parent_timestep is None or s.parent_timestep < t for t, s in enumerate(seq.steps)
    )


def permutation_ok(perm: Sequence[int]) -> bool:
    return sorted(perm) == list(range(len(perm)))
