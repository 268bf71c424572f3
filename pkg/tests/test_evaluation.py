import json
from fractions import Fraction
from math import lcm

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from branchforge.evaluation import (ABLATION_CELLS, EmptyDataset, GenerationOutcome, MissingBranchSet,
                                    ModelGenerator, OracleGenerator, branch_acc, branch_cov, branch_overlap,
                                    pass_at_1, run_ablation_matrix, run_targeted_inference, run_test,
                                    select_targets, write_plot_data)
from branchforge.executor import Branch, ExecutionTrace, Outcome, execute, trace_to_branch
from branchforge.gnn import GnnConfig, Variant
from branchforge.lm import LmConfig
from branchforge.minilang import SourceProgram, parse_test
from branchforge.model import JointModel
from branchforge.trainer import TrainConfig, TrainReport, train_ft_baseline

PROG = SourceProgram.from_text("f", "def f(a):\n  if a < 1:\n    return 0\n  a = a + 1\n"
                                    "  if a < 6:\n    return 2\n  return 1\n")


def branch(lines, tag=None):
    lines = tuple(sorted(lines))
    return Branch(tag or lines, frozenset(lines), lines)


def outcome(lines=(), ids=(), passed=False, parsed=True):
    trace = ExecutionTrace([(0, 1)], Outcome.PASSED if passed else Outcome.ASSERTION_FAILED) if parsed else None
    return GenerationOutcome("r", "check f(0) == 0", parsed, trace, frozenset(lines), frozenset(ids), passed)


def test_outcome_invariant():
    with pytest.raises(ValueError):
        GenerationOutcome("r", "junk", parse_ok=False, passed=True)


def test_branch_acc_hit_miss_hit():
    b1, b2, b3 = branch({1, 2}), branch({1, 3}), branch({1, 4})
    recs = [(b1, outcome(ids={b1.branch_id})), (b2, outcome(ids={b1.branch_id})),
            (b3, outcome(ids={b3.branch_id}))]
    assert branch_acc(recs) == float(Fraction(2, 3))


def test_overlap_sibling_arm_real_program():
    target = trace_to_branch(execute(PROG, parse_test("check f(6) == 1")))
    sibling = run_test(PROG, "f:x", "check f(1) == 2")
    assert sorted(target.line_set) == [2, 4, 5, 7]
    assert branch_overlap([(target, sibling)]) == 0.75
    assert branch_acc([(target, sibling)]) == 0.0
    assert branch_overlap([(branch({3, 4, 5}), outcome(lines={3, 4, 9}))]) == float(Fraction(2, 3))


def test_failed_assertion_counts_for_acc_not_cov():
    target = trace_to_branch(execute(PROG, parse_test("check f(6) == 1")))
    wrong = run_test(PROG, "f:x", "check f(6) == 99")
    assert wrong.parse_ok and not wrong.passed and wrong.executed_lines == target.line_set
    assert branch_acc([(target, wrong)]) == 1.0 and branch_overlap([(target, wrong)]) == 1.0
    assert branch_cov({"f": [wrong]}, {"f": [target.branch_id]}) == 0.0


def test_unparseable_generation_is_a_miss():
    o = run_test(PROG, "f:x", "check f(6 ==")
    assert not o.parse_ok and o.trace is None and not o.executed_lines
    b = branch({2, 4})
    assert branch_acc([(b, o)]) == branch_overlap([(b, o)]) == pass_at_1([(b, o)]) == 0.0


def test_runtime_error_still_records_lines():
    p = SourceProgram.from_text("g", "def g(a):\n  x = 10 // a\n  return x\n")
    o = run_test(p, "g:x", "check g(0) == 1")
    assert o.parse_ok and not o.passed and o.executed_lines == {2}


def test_pass_at_1_mix():
    b = branch({1})
    recs = [(b, outcome(passed=True))] * 4 + [(b, outcome(parsed=False))] + [(b, outcome())] * 5
    assert pass_at_1(recs) == 0.4


def test_branch_cov_examples():
    ids = ["a", "b", "c", "d"]
    suite = [outcome(ids={"a"}, passed=True), outcome(ids={"b"}, passed=True),
             outcome(ids={"c"}, passed=True), outcome(ids={"d"})]
    assert branch_cov({"p": suite}, {"p": ids}) == 0.75
    assert branch_cov({}, {"p": ids}) == 0.0
    assert branch_cov({"p": suite, "q": []}, {"p": ids, "q": ["z"]}) == 0.375
    with pytest.raises(MissingBranchSet):
        branch_cov({"x": suite}, {"p": ids})


def test_empty_inputs():
    for fn in (branch_acc, branch_overlap, pass_at_1):
        with pytest.raises(EmptyDataset):
            fn([])


# independent recount: integer numerators over a common denominator

def _oracle(recs, suites, sets):
    n = len(recs)
    acc = 0
    for b, o in recs:
        for i in o.executed_branch_ids:
            if i == b.branch_id:
                acc += 1
                break
    den = lcm(*[len(b.line_set) for b, _ in recs])
    ov = 0
    for b, o in recs:
        ov += len([x for x in b.line_set if x in o.executed_lines]) * (den // len(b.line_set))
    passed = len([o for _, o in recs if o.passed])
    cden = lcm(*[len(set(v)) for v in sets.values()])
    cnum = 0
    for name, v in sets.items():
        hit = set()
        for o in suites.get(name, []):
            if o.passed:
                hit.update(x for x in o.executed_branch_ids if x in v)
        cnum += len(hit) * (cden // len(set(v)))
    return (Fraction(acc, n), Fraction(ov, den * n), Fraction(passed, n), Fraction(cnum, cden * len(sets)))


def _random_set(rng):
    pool = [f"id{i}" for i in range(8)]
    recs = []
    for _ in range(rng.integers(1, 30)):
        lines = set(rng.choice(20, size=rng.integers(1, 8), replace=False).tolist())
        b = branch(lines, (int(rng.integers(0, 8)),))
        object.__setattr__(b, "path", b.path)
        bid = b.branch_id
        kind = rng.integers(0, 4)
        if kind == 0:
            o = outcome(parsed=False)
        else:
            ex = set(rng.choice(20, size=rng.integers(0, 10), replace=False).tolist())
            ids = {bid} if rng.random() < 0.5 else {pool[rng.integers(0, 8)]}
            o = outcome(ex, ids, passed=bool(kind == 3))
        recs.append((b, o))
    sets = {f"p{k}": sorted(set(rng.choice(pool, size=rng.integers(1, 8)).tolist()) | {recs[0][0].branch_id})
            for k in range(rng.integers(1, 5))}
    names = list(sets)
    suites = {name: [] for name in names}
    for i, (_, o) in enumerate(recs):
        suites[names[i % len(names)]].append(o)
    return recs, suites, sets


def test_metrics_match_independent_recount():
    rng = np.random.default_rng(2024)
    for _ in range(50):
        recs, suites, sets = _random_set(rng)
        want = [float(x) for x in _oracle(recs, suites, sets)]
        got = [branch_acc(recs), branch_overlap(recs), pass_at_1(recs), branch_cov(suites, sets)]
        assert got == want


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metrics_bounded(seed):
    recs, suites, sets = _random_set(np.random.default_rng(seed))
    for v in (branch_acc(recs), branch_overlap(recs), pass_at_1(recs), branch_cov(suites, sets)):
        assert 0.0 <= v <= 1.0


# harness

def test_oracle_self_check(small_corpus):
    progs = small_corpus.split_programs("test")
    res = run_targeted_inference(OracleGenerator(), small_corpus, progs)
    assert res.report.metrics() == {"branch_acc": 1.0, "branch_overlap": 1.0, "pass_at_1": 1.0, "branch_cov": 1.0}
    assert len(res.scored) == len(small_corpus.split("test"))


def test_delta_one(small_corpus):
    progs = small_corpus.split_programs("test")
    res = run_targeted_inference(OracleGenerator(), small_corpus, progs, delta=1)
    assert all(len(s) <= 1 for s in res.suites.values())
    assert sum(len(s) for s in res.suites.values()) == len(res.branch_sets)


def test_count_infeasible_lowers_coverage(small_corpus):
    progs = small_corpus.split_programs("test")
    feasible = select_targets(small_corpus, progs)
    everything = select_targets(small_corpus, progs, count_infeasible=True)
    assert all(len(everything[p]) >= len(feasible[p]) for p in progs)
    res = run_targeted_inference(OracleGenerator(), small_corpus, progs, count_infeasible=True)
    total = sum(len(v) for v in everything.values())
    known = sum(len(v) for v in feasible.values())
    assert (res.report.branch_cov < 1.0) == (total > known)


def test_garbage_generations_do_not_abort(small_corpus):
    progs = small_corpus.split_programs("test")
    res = run_targeted_inference(lambda ts: ["check (" for _ in ts], small_corpus, progs)
    assert res.report.metrics() == {"branch_acc": 0.0, "branch_overlap": 0.0, "pass_at_1": 0.0, "branch_cov": 0.0}


def test_model_generator_is_deterministic(small_corpus):
    model = JointModel.create(0, GnnConfig(layers=1, d_h=32, heads=4), LmConfig(layers=1, d_model=32, d_h=32))
    progs = small_corpus.split_programs("test")[:2]
    a = run_targeted_inference(ModelGenerator(model, small_corpus, max_new=12), small_corpus, progs, delta=2)
    b = run_targeted_inference(ModelGenerator(model, small_corpus, max_new=12), small_corpus, progs, delta=2)
    assert a.report.to_text() == b.report.to_text()


def test_plot_data(small_corpus, tmp_path):
    progs = small_corpus.split_programs("test")
    res = run_targeted_inference(OracleGenerator(), small_corpus, progs)
    write_plot_data(res.report, tmp_path / "plot.tsv")
    lines = (tmp_path / "plot.tsv").read_text().splitlines()
    assert lines[0] == "metric\tprogram\tvalue"
    assert len(lines) == 1 + 4 * (1 + len(res.report.per_program))
    assert "branch_acc\t*\t1.0" in lines


TINY_LM = LmConfig(layers=1, d_model=32, heads=4, d_h=32)


def test_ablation_layout_and_cache(small_corpus, tmp_path):
    calls = []

    def stub(corpus, cfg, out_dir=None):
        calls.append((cfg.gnn_config.variant, cfg.gnn_config.branch_agg, cfg.seed))
        model = JointModel.create(cfg.seed, cfg.gnn_config, TINY_LM)
        return TrainReport(best_step=1), model

    base = TrainConfig(steps=1, gnn_config=GnnConfig(layers=1, d_h=32, heads=4), lm_config=TINY_LM)
    table = run_ablation_matrix(small_corpus, base, [0, 1], tmp_path, delta=1, trainer=stub)
    assert [c.label for c, _ in table.cells] == [c.label for c in ABLATION_CELLS]
    assert len(table.cells) == 5 and all(len(r) == 2 for _, r in table.cells)
    assert len(calls) == 8
    assert table.cells[0][1] == table.cells[3][1]
    assert len(list(tmp_path.glob("*.json"))) == 8
    again = run_ablation_matrix(small_corpus, base, [0, 1], tmp_path, delta=1, trainer=stub)
    assert len(calls) == 8 and again.to_table() == table.to_table()
    assert table.to_table().splitlines()[0].split()[:4] == ["axis", "cell", "BranchAcc", "BranchCov"]


def test_ft_cell_matches_ft_baseline(small_corpus, tmp_path):
    base = TrainConfig(steps=2, batch_size=2, val_limit=2, gnn_config=GnnConfig(layers=1, d_h=32, heads=4),
                       lm_config=TINY_LM)
    ft_cell = [c for c in ABLATION_CELLS if c.variant is Variant.NONE]
    table = run_ablation_matrix(small_corpus, base, [0], tmp_path, cells=ft_cell, delta=1)
    _, model = train_ft_baseline(small_corpus, base)
    res = run_targeted_inference(ModelGenerator(model, small_corpus), small_corpus,
                                 small_corpus.split_programs("test"), delta=1)
    cached = json.loads(next(tmp_path.glob("*.json")).read_text())
    assert {k: cached[k] for k in res.report.metrics()} == res.report.metrics()
    assert table.mean("None (FT)") == res.report.branch_acc
