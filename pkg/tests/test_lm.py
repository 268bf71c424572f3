import math

import numpy as np
import pytest

from branchforge import lm
from branchforge import numerics as nx
from branchforge.corpus import render_prompt
from branchforge.evaluation import run_test
from branchforge.gnn import GnnConfig
from branchforge.lm import (LmConfig, PromptEncoding, SequenceTooLong, SlotMismatch, UnknownToken, Vocab,
                            detokenize, encode_prompt, inject_graph_embeddings, lm_forward, training_loss)
from branchforge.minilang import SourceProgram
from branchforge.model import JointModel
from branchforge.numerics import ParameterStore, Tensor
from branchforge.executor import enumerate_branches
from branchforge.cpg import build_cpg
from branchforge.minilang import parse_program

PROGRAM = SourceProgram.from_text("f", "def f(a, flag):\n  if a < 3:\n    return 1\n  return a\n")


def prompt(available=True):
    tree, p = parse_program(PROGRAM.text, "f")
    branch = enumerate_branches(build_cpg(tree, p)).branches[0]
    return render_prompt(PROGRAM, branch, mask_available=available)


def small_model(seed=0, layers=2):
    store = ParameterStore()
    cfg = LmConfig(layers=layers, max_seq=64)
    lm.init_lm_params(store, cfg, len(Vocab.default()), np.random.default_rng(seed))
    return cfg, store


def test_vocab_closed_and_small():
    v = Vocab.default()
    assert len(v) <= 512
    assert v.tokens.count("<|graph_pad|>") == 1
    with pytest.raises(UnknownToken):
        v.id("banana")


def test_available_prompt_has_consecutive_pads():
    enc = encode_prompt(prompt(True))
    pos = enc.graph_slot_positions
    assert len(pos) == 32 and list(pos) == list(range(pos[0], pos[0] + 32))
    assert enc.target_span is None and enc.ids[-1] == Vocab.default().sep_id


def test_unavailable_prompt_has_marker():
    enc = encode_prompt(prompt(False))
    v = Vocab.default()
    assert enc.graph_slot_positions == ()
    assert list(enc.ids).count(v.not_available_id) == 1


def test_test_source_round_trip():
    enc = encode_prompt(prompt(), "check f(2, true) == 5")
    s, e = enc.target_span
    assert enc.ids[e - 1] == Vocab.default().eos_id
    assert detokenize(enc.ids[s:e]) == "check f(2, true) == 5"
    enc = encode_prompt(prompt(), "check f(-12, false) == -4")
    assert detokenize(enc.ids[enc.target_span[0]:]) == "check f(-12, false) == -4"


def test_unknown_prompt_content():
    with pytest.raises(UnknownToken):
        encode_prompt(prompt().replace("return 1", "return $"))
    with pytest.raises(UnknownToken):
        encode_prompt("not a prompt\n")


def test_injection_examples():
    rng = np.random.default_rng(0)
    emb = Tensor(rng.normal(size=(40, 64)))
    assert inject_graph_embeddings(emb, (), None) is emb
    slots = list(range(4, 36))
    out = inject_graph_embeddings(emb, slots, Tensor(np.zeros((32, 64)))).data
    assert not out[4:36].any() and np.array_equal(out[:4], emb.data[:4])
    assert np.array_equal(out[36:], emb.data[36:])
    e_b = rng.normal(size=(32, 64))
    bumped = e_b.copy()
    bumped[5] += 0.25
    a = inject_graph_embeddings(emb, slots, Tensor(e_b)).data
    b = inject_graph_embeddings(emb, slots, Tensor(bumped)).data
    diff = np.flatnonzero(np.abs(a - b).sum(1))
    assert diff.tolist() == [9] and np.allclose(b[9] - a[9], 0.25)
    with pytest.raises(SlotMismatch):
        inject_graph_embeddings(emb, slots[:5], Tensor(e_b))


def test_forward_shapes_and_limits():
    cfg, store = small_model()
    v = len(Vocab.default())
    out = lm_forward(Tensor(np.zeros((1, 64))), cfg, store)
    assert out.shape == (1, v)
    with pytest.raises(SequenceTooLong):
        lm_forward(Tensor(np.zeros((65, 64))), cfg, store)


def test_causality_bit_identical():
    cfg, store = small_model()
    rng = np.random.default_rng(1)
    x = rng.normal(size=(20, 64))
    a = lm_forward(Tensor(x), cfg, store).data
    y = x.copy()
    y[12] += rng.normal(size=64)
    b = lm_forward(Tensor(y), cfg, store).data
    assert np.array_equal(a[:12], b[:12])
    assert not np.allclose(a[12:], b[12:])


def test_slot_perturbation_reaches_later_positions():
    enc = encode_prompt(prompt())
    cfg = LmConfig(layers=2, max_seq=512)
    store = ParameterStore()
    lm.init_lm_params(store, cfg, len(Vocab.default()), np.random.default_rng(0))
    rng = np.random.default_rng(2)
    e_b = rng.normal(size=(32, 64))
    tok = nx.embedding_lookup(store["lm.tok"], enc.ids)
    a = lm_forward(inject_graph_embeddings(tok, enc.graph_slot_positions, Tensor(e_b)), cfg, store).data
    e_b[3] += rng.normal(size=64)
    b = lm_forward(inject_graph_embeddings(tok, enc.graph_slot_positions, Tensor(e_b)), cfg, store).data
    slot = enc.graph_slot_positions[3]
    assert np.array_equal(a[:slot], b[:slot])
    changed = np.abs(a - b).max(axis=1) > 0
    assert changed[slot:].all()


def test_loss_ignores_prompt():
    enc = encode_prompt(prompt(), "check f(1, false) == 1")
    v = len(Vocab.default())
    logits = np.random.default_rng(3).normal(size=(len(enc), v)) * 50
    s, e = enc.target_span
    for t in range(s - 1, e - 1):
        logits[t] = 0.0
        logits[t, enc.ids[t + 1]] = 60.0
    assert training_loss(enc, Tensor(logits)).item() < 1e-20


def test_loss_closed_forms():
    enc = encode_prompt(prompt(), "check f(1, false) == 1")
    assert training_loss(enc, Tensor(np.zeros((len(enc), 512)))).item() == pytest.approx(math.log(512), rel=1e-12)
    ids = np.array([1, 7, 9, 2])
    one = PromptEncoding(ids, (), (3, 4))
    for gap in (0.5, 3.0, 9.0):
        logits = np.zeros((4, 92))
        logits[2, 2] = gap
        expected = math.log(1 + 91 * math.exp(-gap))
        assert training_loss(one, Tensor(logits)).item() == pytest.approx(expected, rel=1e-12)


def _model_example(model, available=True):
    from branchforge.model import Example
    text = prompt(available)
    tree, p = parse_program(PROGRAM.text, "f")
    cpg = build_cpg(tree, p)
    from branchforge.cpg import derive_branch_mask
    branch = enumerate_branches(cpg).branches[0]
    mask = derive_branch_mask(cpg, branch.line_set)
    enc = encode_prompt(text, "check f(0, false) == 1")
    return Example(enc, cpg if available else None, mask if available else None, "f:0")


def test_untrained_decoding_is_data_not_error():
    model = JointModel.create(0, GnnConfig(layers=1), LmConfig(layers=1))
    ex = _model_example(model)
    ex.encoding = encode_prompt(prompt())
    g1 = model.generate([ex], max_new=8)[0]
    g2 = model.generate([ex], max_new=8)[0]
    assert g1.text == g2.text and len(g1.ids) <= 8
    outcome = run_test(PROGRAM, "f:0", g1.text)
    assert not outcome.passed


def test_batched_decoding_matches_single():
    model = JointModel.create(1, GnnConfig(layers=1), LmConfig(layers=1))
    a = _model_example(model, True)
    b = _model_example(model, False)
    for ex in (a, b):
        ex.encoding = PromptEncoding(ex.encoding.ids[:ex.encoding.target_span[0]], ex.encoding.graph_slot_positions)
    both = model.generate([a, b], max_new=6)
    assert [g.ids for g in both] == [model.generate([a], max_new=6)[0].ids, model.generate([b], max_new=6)[0].ids]


def test_temperature_decoding_is_seeded():
    model = JointModel.create(2, GnnConfig(layers=1), LmConfig(layers=1))
    ex = _model_example(model)
    ex.encoding = encode_prompt(prompt())
    mode = lm.DecodeMode.parse("temp:0.7")
    assert model.generate([ex], mode, 6, seed=3)[0].ids == model.generate([ex], mode, 6, seed=3)[0].ids
    assert str(mode) == "temp:0.7" and str(lm.DecodeMode.parse("greedy")) == "greedy"


def test_end_to_end_gradient_path():
    model = JointModel.create(0, GnnConfig(layers=2), LmConfig(layers=1))
    ex = _model_example(model, True)
    model.loss([ex]).backward()
    assert np.abs(model.store["gnn.1.W0"].grad).max() > 0
    assert np.abs(model.store["gnn.1.self"].grad).max() > 0


def test_fallback_has_no_gnn_involvement():
    model = JointModel.create(0, GnnConfig(layers=2), LmConfig(layers=1))
    ex = _model_example(model, False)
    model.loss([ex]).backward()
    for name, t in model.store.params.items():
        if name.startswith("gnn."):
            assert t.grad is None or not t.grad.any()


def test_projection_path():
    model = JointModel.create(0, GnnConfig(layers=1, d_h=32, heads=4),
                              LmConfig(layers=1, d_model=64, d_h=32, use_projection=True))
    ex = _model_example(model, True)
    model.loss([ex]).backward()
    assert model.store["lm.graph_proj"].grad.any()
    with pytest.raises(ValueError):
        LmConfig(d_model=64, d_h=32)
