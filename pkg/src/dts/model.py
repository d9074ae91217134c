"""Sequence-to-tree parser: BiLSTM encoder, parent-fed attentional LSTM decoder,
a composite-action head and a generate/copy token head.

Every decoding step yields one distribution over a *unified* outcome space laid
out as ``[ApplyConstr ids..., Reduce, token slots...]``. Token slots are the
generation vocabulary followed by the utterance's out-of-vocabulary tokens, so
the two heads of any two models share a support for the same example.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .ast import AstNode
from .corpus import Example, Vocabulary, UNK
from .grammar import ActionVocab, AsdlGrammar
from .numerics import LSTMParams, ParameterStore, Tensor, lstm_cell
from .transition import (
    Action,
    ApplyConstr,
    FrontierKind,
    GenToken,
    Order,
    ParserState,
    REDUCE,
    Reduce,
    sequence_frontiers,
)


class EmptyUtterance(ValueError):
    pass


class MaxStepsExceeded(RuntimeError):
    pass


@dataclass
class ModelConfig:
    embed_size: int = 128
    hidden_size: int = 256
    action_embed_size: int = 128
    type_embed_size: int = 128
    attention: str = "bilinear"
    dropout: float = 0.0
    init_scale: float = 0.1
    multi_token: bool = False

    def __post_init__(self):
        if self.attention not in ("bilinear", "additive"):
            raise ValueError(f"unknown attention {self.attention!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncodedUtterance:
    """Encoder output for a batch; ``h_states`` has shape (B, S, 2*hidden)."""

    token_ids: np.ndarray
    h_states: Tensor
    src_mask: np.ndarray
    init_hidden: Tensor
    utterances: list[tuple[str, ...]]

    def rows(self, idx: Sequence[int]) -> "EncodedUtterance":
        idx = np.asarray(idx, dtype=np.int64)
        return EncodedUtterance(
            self.token_ids[idx],
            nx.index(self.h_states, idx),
            self.src_mask[idx],
            nx.index(self.init_hidden, idx),
            [self.utterances[i] for i in idx],
        )


@dataclass
class DecoderStepState:
    s: Tensor
    s_tilde: Tensor
    context: Tensor
    cell: Tensor
    attention: Tensor


class Encoder:
    def __init__(self, vocab: Vocabulary, config: ModelConfig, rng: np.random.Generator):
        self.vocab = vocab
        self.config = config
        self.store = ParameterStore()
        E, H, s = config.embed_size, config.hidden_size, config.init_scale
        self.embed = self.store.create("encoder.embed", (len(vocab), E), rng, s)
        self.fwd = LSTMParams(self.store, "encoder.fwd", E, H, rng, s)
        self.bwd = LSTMParams(self.store, "encoder.bwd", E, H, rng, s)
        self.init_w = self.store.create("encoder.init.weight", (2 * H, H), rng, s)
        self.init_b = self.store.create("encoder.init.bias", (H,), rng, s)

    def encode(self, utterances: Sequence[Sequence[str]], rng: np.random.Generator | None = None,
               train: bool = False) -> EncodedUtterance:
        if not utterances or any(len(u) == 0 for u in utterances):
            raise EmptyUtterance("cannot encode an empty utterance")
        B = len(utterances)
        S = max(len(u) for u in utterances)
        H = self.config.hidden_size
        ids = np.zeros((B, S), dtype=np.int64)
        mask = np.zeros((B, S), dtype=bool)
        for b, u in enumerate(utterances):
            ids[b, : len(u)] = self.vocab.encode(u)
            mask[b, : len(u)] = True
        ragged = not mask.all()
        emb = nx.embedding_lookup(self.embed, ids)
        emb = nx.dropout(emb, self.config.dropout, rng, train)
        xs = [emb[:, i, :] for i in range(S)]

        def run(params, positions):
            h = c = Tensor(np.zeros((B, H)))
            outs = {}
            for i in positions:
                h_new, c_new = lstm_cell(xs[i], h, c, params)
                if ragged:
                    m = mask[:, i : i + 1].astype(float)
                    h = nx.add(nx.mul(h_new, m), nx.mul(h, 1.0 - m))
                    c = nx.add(nx.mul(c_new, m), nx.mul(c, 1.0 - m))
                else:
                    h, c = h_new, c_new
                outs[i] = h
            return [outs[i] for i in range(S)], h

        fwd_out, fwd_last = run(self.fwd, range(S))
        bwd_out, bwd_last = run(self.bwd, range(S - 1, -1, -1))
        states = nx.concat([nx.stack(fwd_out, axis=1), nx.stack(bwd_out, axis=1)], axis=-1)
        states = nx.dropout(states, self.config.dropout, rng, train)
        init = nx.tanh(nx.add(nx.matmul(nx.concat([fwd_last, bwd_last], -1), self.init_w),
                              self.init_b))
        return EncodedUtterance(ids, states, mask, init, [tuple(u) for u in utterances])


@dataclass
class ExampleArrays:
    """Teacher-forcing inputs for one example under one traversal order."""

    T: int
    prev_ids: np.ndarray
    parent_t: np.ndarray
    type_ids: np.ndarray
    is_composite: np.ndarray
    gold: np.ndarray
    comp_mask: np.ndarray
    gen_mask: np.ndarray
    gate_mask: np.ndarray
    composite_node: np.ndarray
    node_index: np.ndarray
    oov: tuple[str, ...]


@dataclass
class Batch:
    examples: list[Example]
    order: Order
    T: np.ndarray
    prev_ids: np.ndarray
    parent_t: np.ndarray
    type_ids: np.ndarray
    is_composite: np.ndarray
    gold: np.ndarray
    valid: np.ndarray
    comp_mask: np.ndarray
    gen_mask: np.ndarray
    gate_mask: np.ndarray
    composite_node: np.ndarray
    node_index: np.ndarray
    copy_map: np.ndarray
    n_tokens: int


@dataclass
class ForwardResult:
    probs: Tensor
    gold_log_probs: Tensor
    batch: Batch

    def step_log_probs(self, b: int) -> np.ndarray:
        return self.gold_log_probs.data[b, : self.batch.T[b]]


@dataclass
class Hypothesis:
    state: ParserState
    h: np.ndarray
    c: np.ndarray
    s_tilde: np.ndarray
    hs: list[np.ndarray]
    prev_id: int
    log_prob: float = 0.0

    @property
    def length(self) -> int:
        return len(self.state.actions)

    @property
    def score(self) -> float:
        return self.log_prob / max(self.length, 1)


class Seq2TreeModel:
    """One parser (encoder + decoder) decoding in a fixed traversal order.

    Pass ``encoder`` to share an existing encoder's parameters.
    """

    def __init__(self, grammar: AsdlGrammar, src_vocab: Vocabulary, gen_vocab: Vocabulary,
                 config: ModelConfig, order: Order | str, rng: np.random.Generator,
                 encoder: Encoder | None = None, name: str = "model"):
        self.grammar = grammar
        self.src_vocab = src_vocab
        self.gen_vocab = gen_vocab
        self.config = config
        self.order = Order.parse(order)
        self.name = name
        self.actions = ActionVocab.from_grammar(grammar)
        self.type_names = list(grammar.composite_types) + list(grammar.primitive_types)
        self._type_ids = {t: i for i, t in enumerate(self.type_names)}
        self.encoder = encoder if encoder is not None else Encoder(src_vocab, config, rng)
        self.shared_encoder = encoder is not None
        self.dropout_rng: np.random.Generator | None = None
        self._cache: dict = {}

        C1 = len(self.actions)
        G = len(gen_vocab)
        A, Ty, H = config.action_embed_size, config.type_embed_size, config.hidden_size
        s = config.init_scale
        st = self.decoder_store = ParameterStore()
        self.action_embed = st.create("decoder.action_embed", (1 + C1 + G, A), rng, s)
        self.type_embed = st.create("decoder.type_embed", (len(self.type_names), Ty), rng, s)
        self.lstm = LSTMParams(st, "decoder.lstm", A + H + H + Ty, H, rng, s)
        self.sentinel = st.create("decoder.parent_sentinel", (H,), rng, s)
        if config.attention == "bilinear":
            self.att_w = st.create("decoder.att.weight", (H, 2 * H), rng, s)
        else:
            self.att_q = st.create("decoder.att.query", (H, H), rng, s)
            self.att_k = st.create("decoder.att.key", (2 * H, H), rng, s)
            self.att_v = st.create("decoder.att.v", (H,), rng, s)
        self.w_s = st.create("decoder.att_vec.weight", (2 * H + H, H), rng, s)
        self.w_a = st.create("decoder.action_head.weight", (H, A), rng, s)
        self.out_embed = st.create("decoder.action_head.embed", (C1, A), rng, s)
        self.gate_w = st.create("decoder.gate.weight", (H, 2), rng, s)
        self.gate_b = st.create("decoder.gate.bias", (2,), rng, s)
        self.gen_w = st.create("decoder.gen.weight", (H, G + 1), rng, s)
        self.gen_b = st.create("decoder.gen.bias", (G + 1,), rng, s)
        self.copy_w = st.create("decoder.copy.weight", (H, 2 * H), rng, s)

        self.store = ParameterStore()
        self.store.update(self.encoder.store)
        self.store.update(self.decoder_store)

    # -- layout helpers ------------------------------------------------------------

    @property
    def n_closed(self) -> int:
        return len(self.actions)

    @property
    def reduce_index(self) -> int:
        return self.actions.reduce_id

    def type_id(self, type_name: str) -> int:
        return self._type_ids[type_name]

    def oov_tokens(self, utterance: Sequence[str]) -> tuple[str, ...]:
        seen = []
        for tok in utterance:
            if tok not in self.gen_vocab and tok not in seen:
                seen.append(tok)
        return tuple(seen)

    def token_slot(self, token: str, oov: Sequence[str]) -> int:
        if token in self.gen_vocab:
            return self.gen_vocab.id(token)
        if token in oov:
            return len(self.gen_vocab) + list(oov).index(token)
        return self.gen_vocab.unk_id

    def slot_token(self, slot: int, oov: Sequence[str]) -> str:
        G = len(self.gen_vocab)
        return self.gen_vocab.tokens[slot] if slot < G else oov[slot - G]

    def action_input_id(self, action: Action | None) -> int:
        if action is None:
            return 0
        if isinstance(action, ApplyConstr):
            return 1 + self.actions.constructor_id(action.constructor)
        if isinstance(action, Reduce):
            return 1 + self.reduce_index
        return 1 + self.n_closed + self.gen_vocab.id(action.token)

    def unified_index(self, action: Action, oov: Sequence[str]) -> int:
        if isinstance(action, ApplyConstr):
            return self.actions.constructor_id(action.constructor)
        if isinstance(action, Reduce):
            return self.reduce_index
        return self.n_closed + self.token_slot(action.token, oov)

    def unified_action(self, idx: int, oov: Sequence[str]) -> Action:
        if idx < self.reduce_index:
            return ApplyConstr(self.actions.constructor_names[idx])
        if idx == self.reduce_index:
            return REDUCE
        return GenToken(self.slot_token(idx - self.n_closed, oov))

    def frontier_masks(self, frontier) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(composite mask, generation mask incl. reduce slot, gate mask) for one frontier."""
        G = len(self.gen_vocab)
        if frontier.kind is FrontierKind.COMPOSITE:
            comp = np.array(frontier.valid_action_mask, dtype=bool)
            gen = np.ones(G + 1, dtype=bool)
            gate = np.ones(2, dtype=bool)
        else:
            comp = np.ones(self.n_closed, dtype=bool)
            gen = np.zeros(G + 1, dtype=bool)
            gen[:G] = frontier.token_allowed
            gen[G] = frontier.reduce_allowed
            gate = np.array([True, frontier.token_allowed])
        return comp, gen, gate

    # -- teacher forcing ---------------------------------------------------------------

    def example_arrays(self, ex: Example, order: Order | None = None) -> ExampleArrays:
        order = self.order if order is None else Order.parse(order)
        key = (id(ex), order)
        hit = self._cache.get(key)
        if hit is not None and hit[0] is ex:
            return hit[1]
        seq = ex.sequence(order)
        frontiers = sequence_frontiers(seq, self.grammar, self.actions, self.config.multi_token)
        T = len(seq)
        oov = self.oov_tokens(ex.utterance)
        G = len(self.gen_vocab)
        arr = ExampleArrays(
            T=T,
            prev_ids=np.zeros(T, dtype=np.int64),
            parent_t=np.full(T, -1, dtype=np.int64),
            type_ids=np.zeros(T, dtype=np.int64),
            is_composite=np.zeros(T, dtype=bool),
            gold=np.zeros(T, dtype=np.int64),
            comp_mask=np.zeros((T, self.n_closed), dtype=bool),
            gen_mask=np.zeros((T, G + 1), dtype=bool),
            gate_mask=np.zeros((T, 2), dtype=bool),
            composite_node=np.zeros(T, dtype=bool),
            node_index=np.zeros(T, dtype=np.int64),
            oov=oov,
        )
        prev = None
        for t, (step, fr) in enumerate(zip(seq.steps, frontiers)):
            arr.prev_ids[t] = self.action_input_id(prev)
            arr.parent_t[t] = -1 if fr.parent_timestep is None else fr.parent_timestep
            arr.type_ids[t] = self.type_id(fr.field.type)
            arr.is_composite[t] = fr.kind is FrontierKind.COMPOSITE
            arr.gold[t] = self.unified_index(step.action, oov)
            arr.comp_mask[t], arr.gen_mask[t], arr.gate_mask[t] = self.frontier_masks(fr)
            arr.composite_node[t] = isinstance(step.action, ApplyConstr)
            arr.node_index[t] = step.node_index
            prev = step.action
        self._cache[key] = (ex, arr)
        return arr

    def make_batch(self, examples: Sequence[Example], order: Order | None = None) -> Batch:
        order = self.order if order is None else Order.parse(order)
        arrs = [self.example_arrays(ex, order) for ex in examples]
        B = len(arrs)
        Tm = max(a.T for a in arrs)
        S = max(len(ex.utterance) for ex in examples)
        G = len(self.gen_vocab)
        n_tok = G + max(len(a.oov) for a in arrs)

        def pad(name, fill, dtype, extra=()):
            out = np.full((B, Tm) + extra, fill, dtype=dtype)
            for b, a in enumerate(arrs):
                out[b, : a.T] = getattr(a, name)
            return out

        batch = Batch(
            examples=list(examples),
            order=order,
            T=np.array([a.T for a in arrs]),
            prev_ids=pad("prev_ids", 0, np.int64),
            parent_t=pad("parent_t", -1, np.int64),
            type_ids=pad("type_ids", 0, np.int64),
            is_composite=pad("is_composite", True, bool),
            gold=pad("gold", 0, np.int64),
            valid=np.arange(Tm)[None, :] < np.array([a.T for a in arrs])[:, None],
            comp_mask=pad("comp_mask", True, bool, (self.n_closed,)),
            gen_mask=pad("gen_mask", True, bool, (G + 1,)),
            gate_mask=pad("gate_mask", True, bool, (2,)),
            composite_node=pad("composite_node", False, bool),
            node_index=pad("node_index", 0, np.int64),
            copy_map=np.zeros((B, S, n_tok)),
            n_tokens=n_tok,
        )
        for b, (ex, a) in enumerate(zip(examples, arrs)):
            for i, tok in enumerate(ex.utterance):
                batch.copy_map[b, i, self.token_slot(tok, a.oov)] = 1.0
        return batch

    # -- network pieces --------------------------------------------------------------

    def attention_scores(self, query: Tensor, enc: EncodedUtterance) -> Tensor:
        if self.config.attention == "bilinear":
            return nx.einsum("bd,bsd->bs", nx.matmul(query, self.att_w), enc.h_states)
        keys = nx.einsum("bsd,dk->bsk", enc.h_states, self.att_k)
        q = nx.matmul(query, self.att_q)
        hidden = nx.tanh(nx.add(keys, nx.reshape(q, (q.shape[0], 1, q.shape[1]))))
        return nx.einsum("bsk,k->bs", hidden, self.att_v)

    def decode_step(self, prev_action_ids, s_tilde_prev, parent_hidden, type_ids, s_prev, cell_prev,
                    enc: EncodedUtterance, train: bool = False) -> DecoderStepState:
        e = nx.embedding_lookup(self.action_embed, prev_action_ids)
        ty = nx.embedding_lookup(self.type_embed, type_ids)
        x = nx.concat([e, s_tilde_prev, parent_hidden, ty], axis=-1)
        s, cell = lstm_cell(x, s_prev, cell_prev, self.lstm)
        att = nx.softmax(self.attention_scores(s, enc), mask=enc.src_mask)
        ctx = nx.einsum("bs,bsd->bd", att, enc.h_states)
        s_tilde = nx.tanh(nx.matmul(nx.concat([ctx, s], axis=-1), self.w_s))
        s_tilde = nx.dropout(s_tilde, self.config.dropout, self.dropout_rng, train)
        return DecoderStepState(s, s_tilde, ctx, cell, att)

    def composite_distribution(self, s_tilde, mask) -> Tensor:
        logits = nx.einsum("ba,ka->bk", nx.matmul(s_tilde, self.w_a), self.out_embed)
        return nx.softmax(logits, mask=mask)

    def primitive_heads(self, s_tilde, enc: EncodedUtterance, gen_mask, gate_mask):
        """(p(gen | copy) gate, p_gen over vocab + reduce slot, p_copy over positions)."""
        gate = nx.softmax(nx.add(nx.matmul(s_tilde, self.gate_w), self.gate_b), mask=gate_mask)
        p_gen = nx.softmax(nx.add(nx.matmul(s_tilde, self.gen_w), self.gen_b), mask=gen_mask)
        scores = nx.einsum("bd,bsd->bs", nx.matmul(s_tilde, self.copy_w), enc.h_states)
        p_copy = nx.softmax(scores, mask=enc.src_mask)
        return gate, p_gen, p_copy

    def primitive_distribution(self, s_tilde, enc: EncodedUtterance, gen_mask, gate_mask,
                               copy_map) -> tuple[Tensor, Tensor]:
        """Returns (p(Reduce), token-slot probabilities); copies merge by surface token."""
        G = len(self.gen_vocab)
        gate, p_gen, p_copy = self.primitive_heads(s_tilde, enc, gen_mask, gate_mask)
        B = p_gen.shape[0]
        n_tok = copy_map.shape[-1]
        gen_part = p_gen[:, :G]
        if n_tok > G:
            gen_part = nx.concat([gen_part, np.zeros((B, n_tok - G))], axis=-1)
        copied = nx.einsum("bs,bse->be", p_copy, copy_map)
        tokens = nx.add(nx.mul(gate[:, 0:1], gen_part), nx.mul(gate[:, 1:2], copied))
        reduce_p = nx.mul(gate[:, 0:1], p_gen[:, G:G + 1])
        return reduce_p, tokens

    def unified_distribution(self, s_tilde, enc, comp_mask, gen_mask, gate_mask, is_composite,
                             copy_map) -> Tensor:
        B = s_tilde.shape[0]
        C = self.reduce_index
        n_tok = copy_map.shape[-1]
        comp = self.composite_distribution(s_tilde, comp_mask)
        reduce_p, tokens = self.primitive_distribution(s_tilde, enc, gen_mask, gate_mask, copy_map)
        comp_full = nx.concat([comp, np.zeros((B, n_tok))], axis=-1)
        prim_full = nx.concat([np.zeros((B, C)), reduce_p, tokens], axis=-1)
        w = np.asarray(is_composite, dtype=float)[:, None]
        return nx.add(nx.mul(comp_full, w), nx.mul(prim_full, 1.0 - w))

    def initial_state(self, enc: EncodedUtterance):
        B = enc.h_states.shape[0]
        H = self.config.hidden_size
        return enc.init_hidden, Tensor(np.zeros((B, H))), Tensor(np.zeros((B, H)))

    def forward(self, batch: Batch, enc: EncodedUtterance, train: bool = False) -> ForwardResult:
        """Teacher-forced pass over a padded batch."""
        B, Tm = batch.prev_ids.shape
        s, cell, s_tilde = self.initial_state(enc)
        sentinel = nx.add(np.zeros((B, self.config.hidden_size)), self.sentinel)
        history = [sentinel]
        outs = []
        for t in range(Tm):
            parent = nx.pick_rows(history, batch.parent_t[:, t] + 1)
            st = self.decode_step(batch.prev_ids[:, t], s_tilde, parent, batch.type_ids[:, t],
                                  s, cell, enc, train)
            s, cell, s_tilde = st.s, st.cell, st.s_tilde
            history.append(s)
            outs.append(self.unified_distribution(
                s_tilde, enc, batch.comp_mask[:, t], batch.gen_mask[:, t],
                batch.gate_mask[:, t], batch.is_composite[:, t], batch.copy_map))
        probs = nx.stack(outs, axis=1)
        bi, ti = np.meshgrid(np.arange(B), np.arange(Tm), indexing="ij")
        gold_p = nx.index(probs, (bi, ti, batch.gold))
        # padded steps point at a probability-1 placeholder so their log is 0
        gold_p = nx.add(nx.mul(gold_p, batch.valid.astype(float)), (~batch.valid).astype(float))
        return ForwardResult(probs, nx.log(gold_p), batch)

    def encode(self, utterances, train: bool = False) -> EncodedUtterance:
        return self.encoder.encode(utterances, self.dropout_rng, train)

    def teacher_force(self, examples: Sequence[Example], train: bool = False,
                      enc: EncodedUtterance | None = None,
                      order: Order | None = None) -> ForwardResult:
        batch = self.make_batch(examples, order)
        if enc is None:
            enc = self.encode([ex.utterance for ex in examples], train)
        return self.forward(batch, enc, train)

    def sequence_log_prob(self, ex: Example,
                          order: Order | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Per-step gold log-probabilities and full distributions (T, K) for one example."""
        res = self.teacher_force([ex], order=order)
        T = res.batch.T[0]
        return res.gold_log_probs.data[0, :T].copy(), res.probs.data[0, :T].copy()

    # -- inference ------------------------------------------------------------------------

    def beam_decode(self, utterance: Sequence[str], beam_width: int = 5,
                    max_steps: int = 200) -> AstNode:
        return self.beam_search(utterance, beam_width, max_steps)[0].state.extract_ast()

    def greedy_decode(self, utterance: Sequence[str], max_steps: int = 200) -> AstNode:
        return self.beam_decode(utterance, 1, max_steps)

    def beam_search(self, utterance: Sequence[str], beam_width: int = 5,
                    max_steps: int = 200) -> list[Hypothesis]:
        """Completed hypotheses, best (length-normalised log-prob) first."""
        if beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        utterance = tuple(utterance)
        enc1 = self.encoder.encode([utterance])
        oov = self.oov_tokens(utterance)
        G = len(self.gen_vocab)
        n_tok = G + len(oov)
        copy_map1 = np.zeros((1, len(utterance), n_tok))
        for i, tok in enumerate(utterance):
            copy_map1[0, i, self.token_slot(tok, oov)] = 1.0
        H = self.config.hidden_size
        live = [Hypothesis(
            ParserState(self.grammar, None, self.order, self.actions, self.config.multi_token),
            enc1.init_hidden.data[0], np.zeros(H), np.zeros(H), [], 0)]
        done: list[Hypothesis] = []
        for _ in range(max_steps):
            if not live or len(done) >= beam_width:
                break
            n = len(live)
            enc = enc1.rows([0] * n)
            frontiers = [h.state.frontier() for h in live]
            masks = [self.frontier_masks(fr) for fr in frontiers]
            parents = np.stack([
                self.sentinel.data if fr.parent_timestep is None else h.hs[fr.parent_timestep]
                for h, fr in zip(live, frontiers)])
            st = self.decode_step(
                np.array([h.prev_id for h in live]),
                Tensor(np.stack([h.s_tilde for h in live])),
                Tensor(parents),
                np.array([self.type_id(fr.field.type) for fr in frontiers]),
                Tensor(np.stack([h.h for h in live])),
                Tensor(np.stack([h.c for h in live])),
                enc,
            )
            probs = self.unified_distribution(
                st.s_tilde, enc,
                np.stack([m[0] for m in masks]), np.stack([m[1] for m in masks]),
                np.stack([m[2] for m in masks]),
                np.array([fr.kind is FrontierKind.COMPOSITE for fr in frontiers]),
                np.repeat(copy_map1, n, axis=0),
            ).data
            width = beam_width - len(done)
            cands = []
            for i, h in enumerate(live):
                p = probs[i]
                support = np.flatnonzero(p > 0)
                with np.errstate(divide="ignore"):
                    scores = h.log_prob + np.log(p[support])
                top = np.argsort(-scores, kind="stable")[:width]
                cands.extend((float(scores[j]), i, int(support[j])) for j in top)
            cands.sort(key=lambda c: (-c[0], c[1], c[2]))
            new_live = []
            for score, i, idx in cands[:width]:
                h = live[i]
                action = self.unified_action(idx, oov)
                state = h.state.copy()
                state.apply(action)
                nh = Hypothesis(state, st.s.data[i], st.cell.data[i], st.s_tilde.data[i],
                                h.hs + [st.s.data[i]], self.action_input_id(action), score)
                (done if state.is_complete() else new_live).append(nh)
            live = new_live
        if not done:
            raise MaxStepsExceeded(f"no hypothesis completed within {max_steps} steps")
        done.sort(key=lambda h: -h.score)
        return done

    def greedy_decode_batch(self, utterances: Sequence[Sequence[str]],
                            max_steps: int = 200) -> list[AstNode | None]:
        """Greedy decoding of many utterances at once; ``None`` where no tree completed."""
        utts = [tuple(u) for u in utterances]
        if not utts:
            return []
        enc_all = self.encoder.encode(utts)
        G = len(self.gen_vocab)
        oovs = [self.oov_tokens(u) for u in utts]
        S = enc_all.h_states.shape[1]
        copy_all = np.zeros((len(utts), S, G + max(len(o) for o in oovs)))
        for b, (u, oov) in enumerate(zip(utts, oovs)):
            for i, tok in enumerate(u):
                copy_all[b, i, self.token_slot(tok, oov)] = 1.0
        H = self.config.hidden_size
        states = [ParserState(self.grammar, None, self.order, self.actions, self.config.multi_token)
                  for _ in utts]
        h = enc_all.init_hidden.data.copy()
        c = np.zeros_like(h)
        s_tilde = np.zeros_like(h)
        prev = np.zeros(len(utts), dtype=np.int64)
        history = [[] for _ in utts]
        live = list(range(len(utts)))
        for _ in range(max_steps):
            if not live:
                break
            idx = np.array(live)
            enc = enc_all.rows(idx)
            frontiers = [states[i].frontier() for i in live]
            masks = [self.frontier_masks(fr) for fr in frontiers]
            parents = np.stack([
                self.sentinel.data if fr.parent_timestep is None else history[i][fr.parent_timestep]
                for i, fr in zip(live, frontiers)])
            st = self.decode_step(
                prev[idx], Tensor(s_tilde[idx]), Tensor(parents),
                np.array([self.type_id(fr.field.type) for fr in frontiers]),
                Tensor(h[idx]), Tensor(c[idx]), enc)
            probs = self.unified_distribution(
                st.s_tilde, enc,
                np.stack([m[0] for m in masks]), np.stack([m[1] for m in masks]),
                np.stack([m[2] for m in masks]),
                np.array([fr.kind is FrontierKind.COMPOSITE for fr in frontiers]),
                copy_all[idx]).data
            still = []
            for row, i in enumerate(live):
                action = self.unified_action(int(np.argmax(probs[row])), oovs[i])
                states[i].apply(action)
                h[i], c[i], s_tilde[i] = st.s.data[row], st.cell.data[row], st.s_tilde.data[row]
                history[i].append(st.s.data[row])
                prev[i] = self.action_input_id(action)
                if not states[i].is_complete():
                    still.append(i)
            live = still
        return [None if i in live else states[i].extract_ast() for i in range(len(utts))]

    # -- persistence ---------------------------------------------------------------------

    def state_dict(self):
        return self.store.state_dict()

    def load_state_dict(self, state) -> None:
        self.store.load_state_dict(state)


def build_model(grammar: AsdlGrammar, src_vocab: Vocabulary, gen_vocab: Vocabulary,
                config: ModelConfig | None = None, order: Order | str = Order.PRE, seed: int = 0,
                encoder: Encoder | None = None) -> Seq2TreeModel:
    rng = np.random.default_rng(seed)
    return Seq2TreeModel(grammar, src_vocab, gen_vocab, config or ModelConfig(), order, rng,
                         encoder=encoder)
