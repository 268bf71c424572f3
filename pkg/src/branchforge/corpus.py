"""Synthetic MiniLang corpus and branch-annotated dataset curation.

Ground-truth tests are found by scanning argument tuples in a fixed order and
keeping the first tuple whose trace follows each enumerated branch; the
expected value is whatever the reference interpreter returned.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .cpg import BranchMask, Cpg, build_cpg, derive_branch_mask
from .executor import (Branch, BranchSet, Outcome, compile_text, enumerate_branches, execute,
                       make_branch, path_id)
from .minilang import SourceProgram, TestCase, parse_program, parse_test
from .numerics import atomic_write

log = logging.getLogger(__name__)

DATASET_FORMAT_VERSION = 1
N_GRAPH_SLOTS = 32
GRAPH_PAD = "<|graph_pad|>"
NOT_AVAILABLE = "Not available"

FUNC_NAMES = ["classify", "score", "route", "grade", "clamp", "pick", "bucket", "judge"]
INT_PARAMS = ["a", "b", "c", "d"]
BOOL_PARAMS = ["flag", "ok"]
LOCALS = ["x", "y", "r"]
LOOP_VAR = "i"
HELPERS = {
    "twice": "def twice(v):\n  return v * 2\n",
    "inc": "def inc(v):\n  return v + 1\n",
    "absv": "def absv(v):\n  if v < 0:\n    return -v\n  return v\n",
}

PROMPT_HEADER = "# INSTRUCTION: write one MiniLang check test that executes the target branch of the module."
SECTION_SOURCE = "## Module Source:"
SECTION_BRANCH = "## Execution Branches Information (Line to Line executed):"
SECTION_GRAPH = "## Code Property Graph:"
SECTION_INVOKE = "## Invocation:"

SPLITS = ("train", "val", "test")


class GenerationExhausted(RuntimeError):
    pass


@dataclass
class GenerationConfig:
    min_params: int = 1
    max_params: int = 4
    int_low: int = -8
    int_high: int = 8
    param_count_weights: tuple = (1, 3, 4, 3)
    bool_param_prob: float = 0.15
    min_decisions: int = 1
    max_decisions: int = 3
    decision_weights: tuple = (1, 2, 10)
    loop_prob: float = 0.5
    helper_prob: float = 0.2
    elif_prob: float = 0.7
    else_prob: float = 0.9
    nested_prob: float = 0.15
    compound_cond_prob: float = 0.15
    early_return_prob: float = 0.1
    max_lines: int = 40
    const_range: int = 6
    input_budget: int = 20_000
    loop_bound: int = 2
    branch_cap: int = 1000
    split_fractions: tuple = (0.75, 0.10, 0.15)
    # relative weights of comparison operators in generated conditions
    cmp_weights: dict = field(default_factory=lambda: {"<": 3, "<=": 2, "==": 2, "!=": 1})


# ---------------------------------------------------------------------------
# program generation


class _Gen:
    def __init__(self, rng: random.Random, cfg: GenerationConfig):
        self.rng = rng
        self.cfg = cfg
        self.lines: list[str] = []
        self.decisions_left = 0
        self.loop_left = 0
        self.helpers: list[str] = []
        self.focus = None
        self.n_if = 0
        self.loop_bound = None

    def const(self) -> int:
        return self.rng.randint(-self.cfg.const_range, self.cfg.const_range)

    def lit(self, k: int) -> str:
        return str(k) if k >= 0 else f"-{-k}"

    def int_atom(self, ints: list[str]) -> str:
        return self.rng.choice(ints)

    def comparison(self, ints: list[str]) -> str:
        rng = self.rng
        ops, weights = zip(*self.cfg.cmp_weights.items())
        op = rng.choices(ops, weights)[0]
        roll = rng.random()
        if roll < 0.12 and len(ints) >= 2:
            u, v = rng.sample(ints, 2)
            return f"{u} + {v} {op} {self.lit(self.const())}"
        if roll < 0.22:
            return f"{self.int_atom(ints)} % 2 == {rng.choice([0, 1])}"
        v = self.focus if self.focus in ints and rng.random() < 0.7 else self.int_atom(ints)
        k = self.lit(self.const())
        if op in ("<", "<=") and rng.random() < 0.5:
            return f"{k} {op} {v}"
        return f"{v} {op} {k}"

    def condition(self, ints: list[str], bools: list[str]) -> str:
        rng = self.rng
        if bools and rng.random() < 0.3:
            b = rng.choice(bools)
            atom = b if rng.random() < 0.6 else f"not {b}"
        else:
            atom = self.comparison(ints)
        if rng.random() < self.cfg.compound_cond_prob:
            other = self.comparison(ints)
            return f"{atom} {rng.choice(['and', 'or'])} {other}"
        return atom

    def value_expr(self, ints: list[str]) -> str:
        rng = self.rng
        roll = rng.random()
        if roll < 0.4:
            return self.lit(self.const())
        if roll < 0.65:
            return rng.choice(ints)
        if roll < 0.85:
            k = rng.randint(1, 4)
            return f"{rng.choice(ints)} {rng.choice(['+', '-'])} {k}"
        return f"{rng.choice(ints)} * {rng.randint(2, 3)}"

    def emit(self, depth: int, text: str):
        self.lines.append("  " * depth + text)

    def arm(self, depth: int, ints: list[str], bools: list[str], locals_: list[str]):
        rng = self.rng
        if self.decisions_left > 0 and rng.random() < self.cfg.nested_prob:
            self.decisions_left -= 1
            self.if_stmt(depth, ints, bools, locals_)
            return
        if rng.random() < self.cfg.early_return_prob:
            self.emit(depth, f"return {self.value_expr(ints)}")
            return
        target = rng.choice(locals_)
        self.emit(depth, f"{target} = {self.value_expr(ints)}")

    def if_stmt(self, depth: int, ints, bools, locals_):
        rng = self.rng
        # each decision mostly tests its own variable, which keeps arms independent
        pool = [v for v in self.int_params if v != self.loop_bound] or self.int_params
        self.focus = pool[self.n_if % len(pool)]
        self.n_if += 1
        self.emit(depth, f"if {self.condition(ints, bools)}:")
        self.arm(depth + 1, ints, bools, locals_)
        n_elif = 0
        while rng.random() < self.cfg.elif_prob and n_elif < 2:
            n_elif += 1
            self.emit(depth, f"elif {self.condition(ints, bools)}:")
            self.arm(depth + 1, ints, bools, locals_)
        if rng.random() < self.cfg.else_prob:
            self.emit(depth, "else:")
            self.arm(depth + 1, ints, bools, locals_)

    def while_stmt(self, depth: int, ints, bools, locals_):
        rng = self.rng
        bound = self.loop_bound
        self.emit(depth, f"{LOOP_VAR} = 0")
        self.emit(depth, f"while {LOOP_VAR} < {bound}:")
        self.emit(depth + 1, f"{rng.choice(locals_)} = {rng.choice(locals_)} + {rng.choice(ints)}")
        self.emit(depth + 1, f"{LOOP_VAR} = {LOOP_VAR} + 1")

    def program(self, name: str) -> str:
        rng, cfg = self.rng, self.cfg
        sizes = list(range(cfg.min_params, cfg.max_params + 1))
        n_params = rng.choices(sizes, cfg.param_count_weights[: len(sizes)])[0]
        n_bools = sum(rng.random() < cfg.bool_param_prob for _ in range(n_params))
        n_bools = min(n_bools, len(BOOL_PARAMS), n_params - 1)
        self.int_params = INT_PARAMS[: n_params - n_bools]
        bools = BOOL_PARAMS[:n_bools]
        params = self.int_params + bools
        rng.shuffle(params)
        self.emit(0, f"def {name}({', '.join(params)}):")

        locals_ = rng.sample(LOCALS, rng.randint(1, 2))
        ints = list(self.int_params)
        helper = rng.choice(sorted(HELPERS)) if rng.random() < cfg.helper_prob else None
        for loc in locals_:
            src = rng.choice(self.int_params)
            if helper and loc == locals_[0]:
                expr = f"{helper}({src})"
            elif rng.random() < 0.5:
                expr = f"{src} {rng.choice(['+', '-'])} {rng.randint(1, 3)}"
            else:
                expr = src if rng.random() < 0.5 else self.lit(self.const())
            self.emit(1, f"{loc} = {expr}")
        ints += locals_
        if helper:
            self.helpers.append(HELPERS[helper])

        counts = list(range(cfg.min_decisions, cfg.max_decisions + 1))
        self.decisions_left = rng.choices(counts, cfg.decision_weights[: len(counts)])[0]
        loop_at = -1
        if rng.random() < cfg.loop_prob:
            loop_at = rng.randrange(self.decisions_left)
        if loop_at >= 0:
            self.loop_bound = self.int_params[-1]
        k = 0
        while self.decisions_left > 0:
            self.decisions_left -= 1
            if k == loop_at:
                self.while_stmt(1, ints, bools, locals_)
            else:
                self.if_stmt(1, ints, bools, locals_)
            k += 1
        self.emit(1, f"return {rng.choice(locals_ + ints[:1])}")
        return "\n".join(self.lines) + "\n" + "".join(self.helpers)


def generate_program(rng: random.Random, config: GenerationConfig, name: Optional[str] = None) -> str:
    fname = name or rng.choice(FUNC_NAMES)
    return _Gen(rng, config).program(fname)


def generate_programs(seed: int, count: int, config: Optional[GenerationConfig] = None,
                      prefix: str = "prog") -> list[SourceProgram]:
    """Deterministic list of ``count`` distinct, parseable programs."""
    if count < 1:
        raise ValueError("count must be >= 1")
    cfg = config or GenerationConfig()
    rng = random.Random(seed)
    seen: set[str] = set()
    out: list[SourceProgram] = []
    attempts = 0
    while len(out) < count:
        attempts += 1
        if attempts > 100 * count:
            raise GenerationExhausted(f"only {len(out)} unique programs after {attempts - 1} attempts")
        text = generate_program(rng, cfg)
        if text in seen:
            continue
        program = SourceProgram.from_text(f"{prefix}_{len(out):04d}", text)
        if program.line_count > cfg.max_lines:
            continue
        parse_program(text, program.name)
        seen.add(text)
        out.append(program)
    return out


# ---------------------------------------------------------------------------
# test synthesis


def param_domains(program: SourceProgram, config: GenerationConfig, entry: Optional[str] = None):
    """Scan order per parameter: ints 0..high, -1..low; booleans false, true.

    A parameter is boolean when the program only ever uses it as a truth
    value; names from the boolean pool are treated that way.
    """
    tree = compile_text(program.text).tree
    fn = tree.function(entry) if entry else tree.root
    ints = list(range(0, config.int_high + 1)) + list(range(-1, config.int_low - 1, -1))
    domains = []
    for p in tree.params(fn):
        domains.append([False, True] if p.name in BOOL_PARAMS else ints)
    return fn.name, domains


def scan_inputs(domains: list[list], budget: int, seed_key: str):
    """Argument tuples in odometer order, or a sorted seeded sample of them."""
    sizes = [len(d) for d in domains]
    total = int(np.prod(sizes)) if sizes else 1
    if total <= budget:
        yield from itertools.product(*domains)
        return
    seed = int.from_bytes(hashlib.sha256(seed_key.encode()).digest()[:8], "little")
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(total, size=budget, replace=False))
    for flat in picks:
        idx = np.unravel_index(int(flat), sizes)
        yield tuple(d[i] for d, i in zip(domains, idx))


def synthesize_tests(program: SourceProgram, branch_set: BranchSet,
                     config: Optional[GenerationConfig] = None):
    """First witness per branch in scan order; returns (pairs, infeasible)."""
    cfg = config or GenerationConfig()
    name, domains = param_domains(program, cfg)
    compiled = compile_text(program.text)
    wanted = {b.branch_id: b for b in branch_set}
    found: dict[str, TestCase] = {}
    for args in scan_inputs(domains, cfg.input_budget, program.name + program.text):
        trace = compiled.run(name, args)
        if trace.outcome is not Outcome.PASSED or not trace.events:
            continue
        bid = path_id(n for n, _ in trace.events)
        if bid in wanted and bid not in found:
            found[bid] = TestCase(name, tuple(args), trace.returned)
            if len(found) == len(wanted):
                break
    pairs = [(b, found[b.branch_id]) for b in branch_set if b.branch_id in found]
    infeasible = [b for b in branch_set if b.branch_id not in found]
    return pairs, infeasible


# ---------------------------------------------------------------------------
# prompts


def invocation_hint(program: SourceProgram) -> str:
    tree = compile_text(program.text).tree
    fn = tree.root
    holes = ", ".join("_" for _ in tree.params(fn))
    return f"check {fn.name}({holes}) == _"


def render_prompt(program: SourceProgram, branch: Branch, invocation: Optional[str] = None,
                  mask_available: bool = True, n_slots: int = N_GRAPH_SLOTS) -> str:
    lines = sorted(branch.line_set)
    graph = " ".join([GRAPH_PAD] * n_slots) if mask_available else NOT_AVAILABLE
    parts = [
        PROMPT_HEADER,
        SECTION_SOURCE,
        program.text.rstrip("\n"),
        SECTION_BRANCH,
        "lines: " + ", ".join(map(str, lines)),
        "path: " + ", ".join(map(str, branch.line_path)),
        SECTION_GRAPH,
        graph,
        SECTION_INVOKE,
        invocation or invocation_hint(program),
    ]
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# dataset


@dataclass
class DatasetRecord:
    program_ref: str
    prompt_text: str
    branch: Branch
    mask: BranchMask
    test: TestCase
    split: str

    @property
    def record_id(self) -> str:
        return f"{self.program_ref}:{self.branch.branch_id}"

    def to_json(self) -> dict:
        return {
            "program": self.program_ref,
            "prompt": self.prompt_text,
            "branch_id": self.branch.branch_id,
            "node_path": list(self.branch.path),
            "line_path": list(self.branch.line_path),
            "mask": self.mask.to_rle(),
            "test_source": self.test.source_text,
            "split": self.split,
        }

    @classmethod
    def from_json(cls, rec: dict) -> "DatasetRecord":
        branch = Branch(tuple(rec["node_path"]), frozenset(rec["line_path"]), tuple(rec["line_path"]))
        if branch.branch_id != rec["branch_id"]:
            raise ValueError(f"branch id mismatch for {rec['program']}")
        return cls(rec["program"], rec["prompt"], branch, BranchMask.from_rle(rec["mask"]),
                   parse_test(rec["test_source"]), rec["split"])


@dataclass
class CorpusManifest:
    seed: int
    program_count: int
    record_count: int
    split_counts: dict
    generation_config: dict
    infeasible_branches: int = 0

    def to_json(self) -> str:
        return json.dumps({"format_version": DATASET_FORMAT_VERSION, **asdict(self)}, indent=2, sort_keys=True) + "\n"


@dataclass
class Corpus:
    manifest: CorpusManifest
    programs: dict[str, SourceProgram]
    records: list[DatasetRecord]
    infeasible: dict[str, list[Branch]] = field(default_factory=dict)
    _cpgs: dict = field(default_factory=dict, repr=False)

    def cpg(self, name: str) -> Cpg:
        if name not in self._cpgs:
            tree, program = parse_program(self.programs[name].text, name)
            self._cpgs[name] = build_cpg(tree, program)
        return self._cpgs[name]

    def split(self, which: str) -> list[DatasetRecord]:
        return [r for r in self.records if r.split == which]

    def split_programs(self, which: str) -> list[str]:
        return sorted({r.program_ref for r in self.records if r.split == which})


def assign_splits(names: list[str], seed: int, fractions=(0.75, 0.10, 0.15)) -> dict[str, str]:
    order = list(names)
    random.Random(seed * 7919 + 1).shuffle(order)
    n = len(order)
    n_test = max(1, round(n * fractions[2])) if n >= 3 else 0
    n_val = max(1, round(n * fractions[1])) if n >= 3 else 0
    out = {}
    for i, name in enumerate(order):
        out[name] = "test" if i < n_test else ("val" if i < n_test + n_val else "train")
    return out


def curate_program(program: SourceProgram, cfg: GenerationConfig, split: str):
    tree, _ = parse_program(program.text, program.name)
    cpg = build_cpg(tree, program)
    bset = enumerate_branches(cpg, cfg.loop_bound, cfg.branch_cap)
    pairs, infeasible = synthesize_tests(program, bset, cfg)
    hint = invocation_hint(program)
    records = []
    for branch, test in pairs:
        mask = derive_branch_mask(cpg, branch.line_set)
        prompt = render_prompt(program, branch, hint, mask.available)
        records.append(DatasetRecord(program.name, prompt, branch, mask, test, split))
    return cpg, records, infeasible


def validate_record(record: DatasetRecord, program: SourceProgram, cpg: Cpg):
    trace = execute(program, record.test)
    if trace.outcome is not Outcome.PASSED:
        raise AssertionError(f"{record.record_id}: ground truth {trace.outcome.value}")
    if make_branch([n for n, _ in trace.events], {n.id: n.line_start for n in cpg.nodes}).branch_id \
            != record.branch.branch_id:
        raise AssertionError(f"{record.record_id}: ground truth follows another branch")
    if not np.array_equal(derive_branch_mask(cpg, record.branch.line_set).bits, record.mask.bits):
        raise AssertionError(f"{record.record_id}: stale mask")


def curate(seed: int = 7, config: Optional[GenerationConfig] = None, count: int = 200,
           out_dir=None) -> Corpus:
    """Generate programs, synthesize one ground-truth test per feasible branch, split by program."""
    cfg = config or GenerationConfig()
    programs = generate_programs(seed, count, cfg)
    splits = assign_splits([p.name for p in programs], seed, cfg.split_fractions)
    records: list[DatasetRecord] = []
    infeasible = {}
    cpgs = {}
    for program in programs:
        cpg, recs, dropped = curate_program(program, cfg, splits[program.name])
        for r in recs:
            validate_record(r, program, cpg)
        cpgs[program.name] = cpg
        records += recs
        infeasible[program.name] = dropped
    counts = {s: sum(r.split == s for r in records) for s in SPLITS}
    manifest = CorpusManifest(seed, len(programs), len(records), counts, _config_dict(cfg),
                              sum(len(v) for v in infeasible.values()))
    corpus = Corpus(manifest, {p.name: p for p in programs}, records, infeasible, cpgs)
    log.info("curated %d programs, %d records %s", len(programs), len(records), counts)
    if out_dir is not None:
        write_corpus(corpus, out_dir)
    return corpus


def _config_dict(cfg: GenerationConfig) -> dict:
    d = asdict(cfg)
    d["split_fractions"] = list(d["split_fractions"])
    d["decision_weights"] = list(d["decision_weights"])
    d["param_count_weights"] = list(d["param_count_weights"])
    return d


def write_corpus(corpus: Corpus, out_dir):
    out = Path(out_dir)
    (out / "programs").mkdir(parents=True, exist_ok=True)
    for name, program in sorted(corpus.programs.items()):
        atomic_write(out / "programs" / f"{name}.ml", program.text)
    lines = [json.dumps({"format_version": DATASET_FORMAT_VERSION})]
    lines += [json.dumps(r.to_json(), sort_keys=True) for r in corpus.records]
    atomic_write(out / "dataset.jsonl", "\n".join(lines) + "\n")
    atomic_write(out / "manifest.json", corpus.manifest.to_json())
    by_program: dict[str, list[str]] = {}
    for r in corpus.records:
        by_program.setdefault(r.program_ref, []).append(r.test.source_text)
    for name, tests in sorted(by_program.items()):
        atomic_write(out / "programs" / f"{name}.mlt", "\n".join(tests) + "\n")


def load_corpus(out_dir) -> Corpus:
    out = Path(out_dir)
    meta = json.loads((out / "manifest.json").read_text())
    if meta.pop("format_version") != DATASET_FORMAT_VERSION:
        raise ValueError("unsupported manifest version")
    manifest = CorpusManifest(**meta)
    programs = {}
    for path in sorted((out / "programs").glob("*.ml")):
        programs[path.stem] = SourceProgram.from_text(path.stem, path.read_text())
    with open(out / "dataset.jsonl") as fh:
        header = json.loads(fh.readline())
        if header.get("format_version") != DATASET_FORMAT_VERSION:
            raise ValueError("unsupported dataset version")
        records = [DatasetRecord.from_json(json.loads(line)) for line in fh if line.strip()]
    return Corpus(manifest, programs, records)
