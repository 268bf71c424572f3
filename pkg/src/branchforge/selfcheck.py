"""Built-in verification suites: gradient checks, serialization round trips, metric recount."""

from __future__ import annotations

import tempfile
from fractions import Fraction
from math import lcm
from pathlib import Path
from typing import Callable

import numpy as np

from . import gnn
from . import numerics as nx
from .corpus import invocation_hint, render_prompt
from .cpg import BranchMask, Cpg, CpgNode, FEATURE_DIM, build_cpg, derive_branch_mask, dumps_cpg, loads_cpg
from .evaluation import GenerationOutcome, branch_acc, branch_cov, branch_overlap, pass_at_1
from .executor import Branch, ExecutionTrace, Outcome, enumerate_branches, execute, trace_to_branch
from .gnn import GnnConfig
from .lm import LmConfig, detokenize, encode_prompt
from .minilang import SourceProgram, parse_program, parse_test
from .model import Example, JointModel
from .numerics import Tensor

SAMPLE = SourceProgram.from_text("f", "def f(a, b):\n  r = 0\n  i = 0\n  while i < a:\n    r = r + b\n"
                                      "    i = i + 1\n  if r < 3:\n    return r\n  return 0 - r\n")


def _leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def primitive_gradients() -> float:
    """Worst relative error over every differentiable primitive."""
    rng = np.random.default_rng(11)
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    a.data = np.where(np.abs(a.data) < 0.1, 0.5, a.data)
    ops = [
        lambda: nx.add(a, b), lambda: nx.mul(a, b), lambda: nx.neg(a) * b,
        lambda: nx.matmul(a, nx.transpose(b, (1, 0))), lambda: nx.concat([a, b], axis=0),
        lambda: a[1:, ::2] * b[1:, ::2], lambda: a[[0, 2, 2]] * 1.5,
        lambda: nx.softmax(a * 3.0) * b, lambda: nx.relu(a) * b, lambda: nx.leaky_relu(a) * b,
        lambda: nx.sum_(a * b, axis=1, keepdims=True), lambda: nx.mean(a * b, axis=0),
        lambda: nx.reshape(a, (4, 3)) * nx.reshape(b, (4, 3)),
        lambda: nx.layer_norm(a, b[0], b[1]),
        lambda: nx.scatter_rows(a, [0, 2], b[1:, :]),
        lambda: nx.embedding_lookup(a, np.array([[0, 2], [1, 1]])) * 2.0,
    ]
    worst = 0.0
    for op in ops:
        w = rng.normal(size=op().shape)
        report = nx.finite_diff_check(lambda: nx.sum_(op() * w), {"a": a, "b": b}, raise_on_fail=False)
        worst = max(worst, report.max_rel_error)
    q, k, v = _leaf(rng, 2, 4, 3), _leaf(rng, 2, 4, 3), _leaf(rng, 2, 4, 3)
    bias = np.triu(np.full((4, 4), -1e9), 1)
    w = rng.normal(size=(2, 4, 3))
    report = nx.finite_diff_check(lambda: nx.sum_(nx.attention(q, k, v, bias, 0.7) * w),
                                  {"q": q, "k": k, "v": v}, raise_on_fail=False)
    worst = max(worst, report.max_rel_error)
    logits = _leaf(rng, 2, 3, 5)
    targets = np.array([[1, 4, 0], [2, 2, 3]])
    mask = np.array([[1, 0, 1], [1, 1, 0]])
    report = nx.finite_diff_check(lambda: nx.cross_entropy(logits, targets, mask), {"l": logits},
                                  raise_on_fail=False)
    return max(worst, report.max_rel_error)


def gnn_layer_gradients() -> float:
    """One layer of each message-passing variant on a 4-node, 3-relation graph."""
    rng = np.random.default_rng(12)
    feats = rng.normal(size=(4, FEATURE_DIM))
    nodes = [CpgNode(i, "Assign", 0, 1, 1, 0, feats[i]) for i in range(4)]
    graph = Cpg(nodes, [[(0, 1), (0, 2), (2, 3)], [(1, 2), (2, 3)], [(1, 3)]], 1)
    mask = BranchMask(np.array([1, 1, 0, 1], dtype=np.int8))
    worst = 0.0
    for variant in ("attention", "mean"):
        cfg = GnnConfig(layers=1, variant=variant)
        store = nx.ParameterStore()
        gnn.init_gnn_params(store, cfg, rng)
        w = rng.normal(size=(cfg.slots, cfg.d_h))
        report = nx.finite_diff_check(lambda: nx.sum_(gnn.gnn_forward(graph, mask, cfg, store) * w),
                                      store.params, coords=300, raise_on_fail=False)
        worst = max(worst, report.max_rel_error)
    return worst


def sample_example(model: JointModel) -> Example:
    """The bundled sample program with its first enumerated branch as a training example."""
    tree, program = parse_program(SAMPLE.text, SAMPLE.name)
    graph = build_cpg(tree, program)
    test = parse_test("check f(2, 1) == 2")
    branch = trace_to_branch(execute(SAMPLE, test))
    mask = derive_branch_mask(graph, branch.line_set)
    prompt = render_prompt(SAMPLE, branch, invocation_hint(SAMPLE), model.uses_graph)
    enc = encode_prompt(prompt, test.source_text, model.vocab)
    return Example(enc, graph if model.uses_graph else None, mask if model.uses_graph else None, "f:sample")


def joint_model_gradients(coords: int = 80) -> float:
    """Default-size joint model, one record, sampled over representative tensors."""
    model = JointModel.create(13)
    ex = sample_example(model)
    names = ["gnn.1.self", "gnn.1.W0", "gnn.1.W1", "gnn.1.W2", "gnn.1.a_dst1", "gnn.1.a_src2",
             "gnn.3.W1", "gnn.ln_g", "gnn.pad", "lm.tok", "lm.pos", "lm.0.qkv", "lm.0.fc1",
             "lm.3.o", "lm.lnf_g", "lm.out"]
    params = {n: model.store[n] for n in names}
    rng = np.random.default_rng(0)
    worst = 0.0
    for name, p in params.items():
        report = nx.finite_diff_check(lambda: model.loss([ex]), {name: p},
                                      coords=max(1, coords // len(params)), seed=int(rng.integers(1 << 30)),
                                      tolerance=1e-4, retry_eps=1e-7, raise_on_fail=False)
        worst = max(worst, report.max_rel_error)
    return worst


def gradient_suite() -> tuple[bool, str]:
    p, g, j = primitive_gradients(), gnn_layer_gradients(), joint_model_gradients()
    ok = p < 1e-6 and g < 1e-4 and j < 1e-3
    return ok, f"primitives {p:.2e} (<1e-6), gnn layer {g:.2e} (<1e-4), joint model {j:.2e} (<1e-3)"


def round_trip_suite() -> tuple[bool, str]:
    """Serialization formats reproduce their input exactly."""
    failures = []
    tree, program = parse_program(SAMPLE.text, SAMPLE.name)
    graph = build_cpg(tree, program)
    if dumps_cpg(loads_cpg(dumps_cpg(graph))) != dumps_cpg(graph):
        failures.append("cpg")
    for branch in enumerate_branches(graph):
        mask = derive_branch_mask(graph, branch.line_set)
        if not np.array_equal(BranchMask.from_rle(mask.to_rle()).bits, mask.bits):
            failures.append("mask")
            break
    prompt = render_prompt(SAMPLE, enumerate_branches(graph).branches[0])
    for text in ("check f(2, true) == 5", "check f(-12, false) == -4", "check f(0, 0) == true"):
        enc = encode_prompt(prompt, text)
        if detokenize(enc.ids[enc.target_span[0]:]) != text or parse_test(text).source_text != text:
            failures.append(f"test {text!r}")
    model = JointModel.create(5, GnnConfig(layers=1, d_h=32, heads=4), LmConfig(layers=1, d_model=32, d_h=32))
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.ckpt"
        model.save(path)
        loaded, _ = JointModel.load(path)
        loaded.save(Path(tmp) / "again.ckpt")
        same = path.read_bytes() == (Path(tmp) / "again.ckpt").read_bytes()
        same = same and all(np.array_equal(model.store[k].data, loaded.store[k].data) for k in model.store.params)
        if not same or loaded.gnn_cfg != model.gnn_cfg or loaded.lm_cfg != model.lm_cfg:
            failures.append("checkpoint")
    return not failures, "all formats stable" if not failures else "failed: " + ", ".join(failures)


# independent metric recount over integer numerators


def _recount(recs, suites, sets):
    n = len(recs)
    acc = sum(1 for b, o in recs if any(i == b.branch_id for i in o.executed_branch_ids))
    den = lcm(*[len(b.line_set) for b, _ in recs])
    ov = sum(len([x for x in b.line_set if x in o.executed_lines]) * (den // len(b.line_set)) for b, o in recs)
    passed = len([o for _, o in recs if o.passed])
    cden = lcm(*[len(set(v)) for v in sets.values()])
    cnum = 0
    for name, v in sets.items():
        hit = set()
        for o in suites.get(name, []):
            if o.passed:
                hit.update(x for x in o.executed_branch_ids if x in v)
        cnum += len(hit) * (cden // len(set(v)))
    return [float(Fraction(acc, n)), float(Fraction(ov, den * n)), float(Fraction(passed, n)),
            float(Fraction(cnum, cden * len(sets)))]


def random_outcome_set(rng: np.random.Generator):
    """Random (target, outcome) records plus per-program suites and branch sets."""
    pool = [f"id{i}" for i in range(8)]
    recs = []
    for _ in range(int(rng.integers(1, 30))):
        lines = tuple(sorted(rng.choice(20, size=int(rng.integers(1, 8)), replace=False).tolist()))
        b = Branch((int(rng.integers(0, 8)),) + lines, frozenset(lines), lines)
        kind = int(rng.integers(0, 4))
        if kind == 0:
            o = GenerationOutcome("r", "?")
        else:
            executed = frozenset(rng.choice(20, size=int(rng.integers(0, 10)), replace=False).tolist())
            ids = frozenset([b.branch_id if rng.random() < 0.5 else pool[int(rng.integers(0, 8))]])
            outcome = Outcome.PASSED if kind == 3 else Outcome.ASSERTION_FAILED
            o = GenerationOutcome("r", "check", True, ExecutionTrace([(0, 1)], outcome), executed, ids, kind == 3)
        recs.append((b, o))
    sets = {f"p{k}": sorted(set(rng.choice(pool, size=int(rng.integers(1, 8))).tolist()) | {recs[0][0].branch_id})
            for k in range(int(rng.integers(1, 5)))}
    names = list(sets)
    suites = {name: [] for name in names}
    for i, (_, o) in enumerate(recs):
        suites[names[i % len(names)]].append(o)
    return recs, suites, sets


def metric_oracle_suite(trials: int = 50, seed: int = 2024) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    for t in range(trials):
        recs, suites, sets = random_outcome_set(rng)
        got = [branch_acc(recs), branch_overlap(recs), pass_at_1(recs), branch_cov(suites, sets)]
        if got != _recount(recs, suites, sets):
            return False, f"mismatch on trial {t}: {got} vs {_recount(recs, suites, sets)}"
    return True, f"{trials} randomized sets match exactly"


SUITES: dict[str, Callable[[], tuple[bool, str]]] = {
    "finite-diff": gradient_suite,
    "round-trip": round_trip_suite,
    "metric-oracle": metric_oracle_suite,
}
