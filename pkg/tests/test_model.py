from collections import Counter

import numpy as np
import pytest

from dts import numerics as nx
from dts.ast import parse_sexpr, validate
from dts.corpus import UNK, Example, Vocabulary, build_vocab
from dts.grammar import parse_grammar
from dts.model import (
    EmptyUtterance,
    EncodedUtterance,
    Encoder,
    MaxStepsExceeded,
    build_model,
)
from dts.numerics import Tensor
from dts.transition import ParserState

from conftest import tiny_config

FLAT = parse_grammar(
    "primitive identifier\n"
    "stmt = Assign(expr target, expr? value, expr? extra) | Pass\n"
    "expr = Name(identifier id) | Const(identifier v)\n"
)
WORDS = "a b c d x y".split()


def flat_model(seed, order="pre", **kw):
    src = Vocabulary.build(Counter(WORDS))
    gen = Vocabulary.build(Counter(["x", "y"]), reserved=(UNK,))
    return build_model(FLAT, src, gen, tiny_config(**kw), order, seed)


@pytest.fixture(scope="module")
def vocabs(python_corpus):
    return build_vocab(python_corpus)


@pytest.fixture
def model(python_grammar, vocabs):
    return build_model(python_grammar, *vocabs, tiny_config(), "pre", 1)


def _np_lstm(x, h, c, w, b):
    z = np.concatenate([x, h]) @ w + b
    H = h.shape[0]
    sig = lambda v: 1 / (1 + np.exp(-v))
    i, f, g, o = sig(z[:H]), sig(z[H:2 * H]), np.tanh(z[2 * H:3 * H]), sig(z[3 * H:])
    c2 = f * c + i * g
    return o * np.tanh(c2), c2


def test_encoder_shapes_and_empty(model):
    enc = model.encode([["a", "b", "c"], ["d"]])
    assert enc.h_states.shape == (2, 3, 8)
    assert enc.src_mask.tolist() == [[True] * 3, [True, False, False]]
    with pytest.raises(EmptyUtterance):
        model.encode([[]])


def test_encoder_matches_loop_reference(model):
    utt = ["if", "name", "x", "zzz"]
    enc = model.encode([utt])
    p = {k: v.data for k, v in model.encoder.store.items()}
    emb = [p["encoder.embed"][model.src_vocab.id(t)] for t in utt]
    H = 4
    fwd, h, c = [], np.zeros(H), np.zeros(H)
    for x in emb:
        h, c = _np_lstm(x, h, c, p["encoder.fwd.weight"], p["encoder.fwd.bias"])
        fwd.append(h)
    bwd, hb, cb = [None] * len(utt), np.zeros(H), np.zeros(H)
    for i in reversed(range(len(utt))):
        hb, cb = _np_lstm(emb[i], hb, cb, p["encoder.bwd.weight"], p["encoder.bwd.bias"])
        bwd[i] = hb
    ref = np.stack([np.concatenate([f, b]) for f, b in zip(fwd, bwd)])
    np.testing.assert_allclose(enc.h_states.data[0], ref, atol=1e-12)
    init = np.tanh(np.concatenate([h, hb]) @ p["encoder.init.weight"] + p["encoder.init.bias"])
    np.testing.assert_allclose(enc.init_hidden.data[0], init, atol=1e-12)


def test_encoder_direction_symmetry(vocabs):
    """Swapping the two directions' weights and reversing the input mirrors the states."""
    src = vocabs[0]
    a = Encoder(src, tiny_config(), np.random.default_rng(2))
    b = Encoder(src, tiny_config(), np.random.default_rng(9))
    state = a.store.state_dict()
    for part in ("weight", "bias"):
        state[f"encoder.fwd.{part}"], state[f"encoder.bwd.{part}"] = (
            state[f"encoder.bwd.{part}"], state[f"encoder.fwd.{part}"])
    b.store.load_state_dict(state)
    utt = ["if", "name", "x", "pass", "y"]
    ha = a.encode([utt]).h_states.data[0]
    hb = b.encode([utt[::-1]]).h_states.data[0][::-1]
    np.testing.assert_allclose(hb[:, :4], ha[:, 4:], atol=1e-13)
    np.testing.assert_allclose(hb[:, 4:], ha[:, :4], atol=1e-13)


def test_ragged_batch_matches_single(model):
    single = model.encode([["x", "y"]])
    batch = model.encode([["a", "b", "c", "d"], ["x", "y"]])
    np.testing.assert_allclose(batch.h_states.data[1, :2], single.h_states.data[0], atol=1e-13)
    np.testing.assert_allclose(batch.init_hidden.data[1], single.init_hidden.data[0], atol=1e-13)


def _step_inputs(model, enc):
    H = model.config.hidden_size
    rng = np.random.default_rng(5)
    return dict(prev_action_ids=np.array([3]), s_tilde_prev=Tensor(rng.normal(size=(1, H))),
                parent_hidden=Tensor(rng.normal(size=(1, H))), type_ids=np.array([1]),
                s_prev=Tensor(rng.normal(size=(1, H))), cell_prev=Tensor(rng.normal(size=(1, H))),
                enc=enc)


@pytest.mark.parametrize("attention", ["bilinear", "additive"])
def test_decode_step_matches_loop_reference(python_grammar, vocabs, attention):
    model = build_model(python_grammar, *vocabs, tiny_config(attention=attention), "bfs", 4)
    enc = model.encode([["x", "if", "y"]])
    kw = _step_inputs(model, enc)
    st = model.decode_step(**kw)
    p = {k: v.data for k, v in model.store.items()}
    x = np.concatenate([p["decoder.action_embed"][3], kw["s_tilde_prev"].data[0],
                        kw["parent_hidden"].data[0], p["decoder.type_embed"][1]])
    s, c = _np_lstm(x, kw["s_prev"].data[0], kw["cell_prev"].data[0],
                    p["decoder.lstm.weight"], p["decoder.lstm.bias"])
    hs = enc.h_states.data[0]
    if attention == "bilinear":
        scores = np.array([s @ p["decoder.att.weight"] @ h for h in hs])
    else:
        scores = np.array([np.tanh(s @ p["decoder.att.query"] + h @ p["decoder.att.key"])
                           @ p["decoder.att.v"] for h in hs])
    att = np.exp(scores - scores.max())
    att /= att.sum()
    ctx = att @ hs
    s_tilde = np.tanh(np.concatenate([ctx, s]) @ p["decoder.att_vec.weight"])
    np.testing.assert_allclose(st.s.data[0], s, atol=1e-12)
    np.testing.assert_allclose(st.attention.data[0], att, atol=1e-12)
    np.testing.assert_allclose(st.s_tilde.data[0], s_tilde, atol=1e-12)


def test_singleton_attention_is_exact(model):
    enc = model.encode([["x"]])
    st = model.decode_step(**_step_inputs(model, enc))
    assert st.attention.data.tolist() == [[1.0]]
    np.testing.assert_array_equal(st.context.data[0], enc.h_states.data[0, 0])


def test_equal_scores_give_mean_context(model):
    model.att_w.data[:] = 0.0
    enc = model.encode([["x", "y", "if"]])
    st = model.decode_step(**_step_inputs(model, enc))
    np.testing.assert_allclose(st.attention.data[0], np.full(3, 1 / 3), atol=1e-15)
    np.testing.assert_allclose(st.context.data[0], enc.h_states.data[0].mean(0), atol=1e-14)


def test_composite_head_support(mini, vocabs):
    model = build_model(mini, *vocabs, tiny_config(), "pre", 0)
    state = ParserState(mini)
    comp, gen, gate = model.frontier_masks(state.frontier())
    s = Tensor(np.random.default_rng(1).normal(size=(1, 4)))
    p = model.composite_distribution(s, comp[None]).data[0]
    assert np.flatnonzero(p).tolist() == [0, 1]
    assert abs(p.sum() - 1) < 1e-12
    model.w_a.data[:] = 0.0
    np.testing.assert_allclose(model.composite_distribution(s, comp[None]).data[0, :2], 0.5)


def _hand_encoding(values):
    """One utterance whose first state coordinate is ``values``; other coordinates zero."""
    hs = np.zeros((1, len(values), 8))
    hs[0, :, 0] = values
    return EncodedUtterance(np.zeros((1, len(values)), dtype=np.int64), Tensor(hs),
                            np.ones((1, len(values)), dtype=bool), Tensor(np.zeros((1, 4))), [])


def test_copy_merges_repeated_tokens(model):
    """p(gen)=0 and pointer mass 0.3/0.7 on two copies of the same word."""
    utt = ["zork", "zork"]
    oov = model.oov_tokens(utt)
    assert oov == ("zork",)
    G = len(model.gen_vocab)
    copy_map = np.zeros((1, 2, G + 1))
    copy_map[0, :, model.token_slot("zork", oov)] = 1.0
    model.copy_w.data[:] = 0.0
    model.copy_w.data[0, 0] = 1.0
    enc = _hand_encoding(np.log([0.3, 0.7]))
    s = Tensor(np.eye(4)[:1])
    gen_mask = np.ones((1, G + 1), dtype=bool)
    _, _, p_copy = model.primitive_heads(s, enc, gen_mask, np.array([[True, True]]))
    np.testing.assert_allclose(p_copy.data[0], [0.3, 0.7], atol=1e-15)
    reduce_p, tokens = model.primitive_distribution(s, enc, gen_mask, np.array([[False, True]]),
                                                    copy_map)
    assert reduce_p.data[0, 0] == 0.0
    assert abs(tokens.data[0, G] - 1.0) < 1e-15
    assert np.count_nonzero(tokens.data) == 1


def test_generation_only_equals_gen_head(model):
    G = len(model.gen_vocab)
    enc = model.encode([["x", "y"]])
    s = Tensor(np.random.default_rng(3).normal(size=(1, 4)))
    copy_map = np.zeros((1, 2, G + 1))
    copy_map[0, 0, model.token_slot("x", ())] = 1.0
    gen_mask = np.ones((1, G + 1), dtype=bool)
    _, p_gen, _ = model.primitive_heads(s, enc, gen_mask, np.array([[True, False]]))
    reduce_p, tokens = model.primitive_distribution(s, enc, gen_mask, np.array([[True, False]]),
                                                    copy_map)
    np.testing.assert_array_equal(tokens.data[0, :G], p_gen.data[0, :G])
    assert reduce_p.data[0, 0] == p_gen.data[0, G]


def test_half_gate_mixture(model):
    G = len(model.gen_vocab)
    utt = ["x", "pass", "x", "q"]
    oov = model.oov_tokens(utt)
    copy_map = np.zeros((1, 4, G + len(oov)))
    for i, tok in enumerate(utt):
        copy_map[0, i, model.token_slot(tok, oov)] = 1.0
    model.gate_w.data[:] = 0.0
    model.gate_b.data[:] = 0.0
    enc = model.encode([utt])
    s = Tensor(np.random.default_rng(8).normal(size=(1, 4)))
    gen_mask = np.ones((1, G + 1), dtype=bool)
    gate, p_gen, p_copy = model.primitive_heads(s, enc, gen_mask, np.array([[True, True]]))
    assert gate.data.tolist() == [[0.5, 0.5]]
    reduce_p, tokens = model.primitive_distribution(s, enc, gen_mask, np.array([[True, True]]),
                                                    copy_map)
    for slot in range(G + len(oov)):
        tok = model.slot_token(slot, oov)
        gen = p_gen.data[0, slot] if slot < G else 0.0
        cp = sum(p_copy.data[0, i] for i, t in enumerate(utt) if model.token_slot(t, oov) == slot)
        assert abs(tokens.data[0, slot] - (0.5 * gen + 0.5 * cp)) < 1e-15, tok
    assert abs(reduce_p.data[0, 0] + tokens.data.sum() - 1.0) < 1e-12


@pytest.mark.parametrize("order", ["pre", "bfs"])
def test_teacher_forced_distributions(python_grammar, vocabs, python_corpus, order):
    model = build_model(python_grammar, *vocabs, tiny_config(), order, 2)
    res = model.teacher_force(python_corpus.examples[:5])
    for b, ex in enumerate(python_corpus.examples[:5]):
        T = ex.size
        assert res.batch.T[b] == T
        probs = res.probs.data[b, :T]
        np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-12)
        logp, single = model.sequence_log_prob(ex)
        K = single.shape[1]
        np.testing.assert_allclose(single, probs[:, :K], atol=1e-12)
        assert not probs[:, K:].any()
        np.testing.assert_allclose(logp, res.step_log_probs(b), atol=1e-12)
        assert np.all(np.isfinite(logp))
        gold = res.batch.gold[b, :T]
        np.testing.assert_allclose(np.log(probs[np.arange(T), gold]), logp, atol=1e-12)


def test_aligned_supports_agree(python_grammar, vocabs, python_corpus):
    a = build_model(python_grammar, *vocabs, tiny_config(), "pre", 1)
    b = build_model(python_grammar, *vocabs, tiny_config(), "bfs", 2)
    for ex in python_corpus:
        _, pa = a.sequence_log_prob(ex)
        _, pb = b.sequence_log_prob(ex)
        for t, tb in enumerate(ex.alignment.pre_to_bfs):
            assert np.array_equal(pa[t] > 0, pb[tb] > 0)


def test_greedy_is_stepwise_argmax(python_grammar, vocabs, python_corpus):
    """Teacher-forcing the greedy output must reproduce an argmax at every step."""
    for seed, order in [(0, "pre"), (1, "bfs"), (2, "pre")]:
        model = build_model(python_grammar, *vocabs, tiny_config(init_scale=0.5), order, seed)
        for ex in python_corpus.examples[:4]:
            try:
                ast = model.greedy_decode(ex.utterance, max_steps=80)
            except MaxStepsExceeded:
                continue
            validate(ast, python_grammar)
            decoded = Example(ex.utterance, ast, python_grammar)
            _, probs = model.sequence_log_prob(decoded)
            gold = model.example_arrays(decoded).gold
            assert np.array_equal(probs.argmax(-1), gold)
            assert model.greedy_decode_batch([ex.utterance], 80)[0] == ast


def test_single_derivation_grammar():
    g = parse_grammar("s = A(t x)\nt = B\n")
    src = Vocabulary.build(Counter(["w"]))
    gen = Vocabulary.build(Counter(), reserved=(UNK,))
    for seed in range(3):
        model = build_model(g, src, gen, tiny_config(), "bfs", seed)
        assert model.beam_decode(["w", "w"], 5) == parse_sexpr("(A (B))", g)


def test_beam_monotonicity():
    rng = np.random.default_rng(11)
    for seed in range(100):
        model = flat_model(seed, "pre" if seed % 2 else "bfs",
                           init_scale=float(rng.uniform(0.1, 1.0)))
        utt = list(rng.choice(WORDS, size=int(rng.integers(1, 6))))
        greedy = model.beam_search(utt, 1)
        wide = model.beam_search(utt, 5)
        assert max(h.log_prob for h in wide) >= greedy[0].log_prob - 1e-12
        assert [h.score for h in wide] == sorted((h.score for h in wide), reverse=True)
        for h in wide:
            validate(h.state.extract_ast(), FLAT)


def test_max_steps(python_grammar, vocabs):
    model = build_model(python_grammar, *vocabs, tiny_config(), "pre", 0)
    with pytest.raises(MaxStepsExceeded):
        model.beam_decode(["x"], 3, max_steps=1)
    with pytest.raises(ValueError):
        model.beam_decode(["x"], 0)
    assert model.greedy_decode_batch([["x"]], max_steps=1) == [None]


def test_inference_is_deterministic():
    a, b = flat_model(5), flat_model(5)
    utt = ["a", "x", "y"]
    assert a.beam_decode(utt) == b.beam_decode(utt) == a.beam_decode(utt)


def test_shared_encoder(python_grammar, vocabs):
    a = build_model(python_grammar, *vocabs, tiny_config(), "pre", 0)
    b = build_model(python_grammar, *vocabs, tiny_config(), "bfs", 1, encoder=a.encoder)
    assert b.store["encoder.embed"] is a.store["encoder.embed"]
    assert b.store["decoder.gen.weight"] is not a.store["decoder.gen.weight"]


def test_state_dict_round_trip(python_grammar, vocabs):
    a = build_model(python_grammar, *vocabs, tiny_config(), "pre", 0)
    b = build_model(python_grammar, *vocabs, tiny_config(), "pre", 1)
    b.load_state_dict(a.state_dict())
    for name, p in a.store.items():
        np.testing.assert_array_equal(p.data, b.store[name].data)


def test_dropout_only_in_training(python_grammar, vocabs, python_corpus):
    model = build_model(python_grammar, *vocabs, tiny_config(dropout=0.5), "pre", 0)
    model.dropout_rng = np.random.default_rng(0)
    ex = python_corpus.examples[:2]
    eval1 = model.teacher_force(ex).probs.data
    eval2 = model.teacher_force(ex).probs.data
    train = model.teacher_force(ex, train=True).probs.data
    np.testing.assert_array_equal(eval1, eval2)
    assert not np.allclose(eval1, train)
    assert nx.Tensor(train).shape == eval1.shape
