"""Branch-targeted inference, the four coverage metrics and the ablation matrix."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Protocol, Sequence

from .corpus import Corpus, DatasetRecord, invocation_hint, render_prompt
from .cpg import derive_branch_mask
from .executor import Branch, BranchSet, ExecutionTrace, Outcome, enumerate_branches, execute, trace_to_branch
from .gnn import BranchAgg, Variant
from .lm import GREEDY, DecodeMode
from .minilang import LexError, ParseError, parse_test
from .model import JointModel
from .numerics import atomic_write

log = logging.getLogger(__name__)


class EmptyDataset(ValueError):
    pass


class MissingBranchSet(KeyError):
    pass


@dataclass
class GenerationOutcome:
    record_id: str
    test_source: str
    parse_ok: bool = False
    trace: Optional[ExecutionTrace] = None
    executed_lines: frozenset = frozenset()
    executed_branch_ids: frozenset = frozenset()
    passed: bool = False

    def __post_init__(self):
        if self.passed and not (self.parse_ok and self.trace is not None
                                and self.trace.outcome is Outcome.PASSED):
            raise ValueError("a passing outcome needs a parsed test with a passing trace")


def run_test(program, record_id: str, test_source: str) -> GenerationOutcome:
    """Parse and execute one generated test; malformed text is an outcome, not an error."""
    try:
        test = parse_test(test_source)
    except (LexError, ParseError):
        return GenerationOutcome(record_id, test_source)
    trace = execute(program, test)
    lines, ids = frozenset(), frozenset()
    if trace.events:
        branch = trace_to_branch(trace)
        lines, ids = branch.line_set, frozenset([branch.branch_id])
    return GenerationOutcome(record_id, test_source, True, trace, lines, ids,
                             trace.outcome is Outcome.PASSED)


# ---------------------------------------------------------------------------
# metrics (exact rational arithmetic, rounded once at the end)


def _nonempty(records):
    records = list(records)
    if not records:
        raise EmptyDataset("no records to score")
    return records


def branch_acc(records: Iterable[tuple[Branch, GenerationOutcome]]) -> float:
    records = _nonempty(records)
    hits = sum(1 for b, o in records if b.branch_id in o.executed_branch_ids)
    return float(Fraction(hits, len(records)))


def branch_overlap(records: Iterable[tuple[Branch, GenerationOutcome]]) -> float:
    records = _nonempty(records)
    total = sum((Fraction(len(b.line_set & o.executed_lines), len(b.line_set)) for b, o in records),
                Fraction(0))
    return float(total / len(records))


def pass_at_1(records: Iterable[tuple[Branch, GenerationOutcome]]) -> float:
    records = _nonempty(records)
    return float(Fraction(sum(1 for _, o in records if o.passed), len(records)))


def branch_cov(suites: Mapping[str, Sequence[GenerationOutcome]],
               branch_sets: Mapping[str, Iterable[str]]) -> float:
    """Mean over programs of the fraction of enumerated branch ids hit by passing tests."""
    for name in suites:
        if name not in branch_sets:
            raise MissingBranchSet(name)
    if not branch_sets:
        raise EmptyDataset("no programs to score")
    total = Fraction(0)
    for name, ids in branch_sets.items():
        ids = set(ids)
        if not ids:
            raise MissingBranchSet(f"{name}: empty branch set")
        covered = set()
        for o in suites.get(name, ()):
            if o.passed:
                covered |= o.executed_branch_ids
        total += Fraction(len(covered & ids), len(ids))
    return float(total / len(branch_sets))


# ---------------------------------------------------------------------------
# test generators


@dataclass
class Target:
    program: str
    branch: Branch
    record: Optional[DatasetRecord]

    @property
    def record_id(self) -> str:
        return f"{self.program}:{self.branch.branch_id}"


class TestGenerator(Protocol):
    def __call__(self, targets: Sequence[Target]) -> list[str]: ...


class OracleGenerator:
    """Stub model that answers each target with its curated ground-truth test."""
    __test__ = False

    def __call__(self, targets: Sequence[Target]) -> list[str]:
        return [t.record.test.source_text if t.record is not None else "" for t in targets]


class ModelGenerator:
    __test__ = False

    def __init__(self, model: JointModel, corpus: Corpus, mode: DecodeMode = GREEDY,
                 batch_size: int = 16, max_new: int = 64, seed: int = 0):
        self.model, self.corpus, self.mode = model, corpus, mode
        self.batch_size, self.max_new, self.seed = batch_size, max_new, seed

    def _record(self, t: Target) -> DatasetRecord:
        if t.record is not None:
            return t.record
        program = self.corpus.programs[t.program]
        mask = derive_branch_mask(self.corpus.cpg(t.program), t.branch.line_set)
        prompt = render_prompt(program, t.branch, invocation_hint(program), mask.available)
        return DatasetRecord(t.program, prompt, t.branch, mask, None, "")

    def __call__(self, targets: Sequence[Target]) -> list[str]:
        examples = [self.model.example(self._record(t), self.corpus, with_target=False) for t in targets]
        # group by length so right-padding stays small
        order = sorted(range(len(examples)), key=lambda i: (len(examples[i].encoding), i))
        out = [""] * len(examples)
        for start in range(0, len(order), self.batch_size):
            idx = order[start:start + self.batch_size]
            gens = self.model.generate([examples[i] for i in idx], self.mode, self.max_new,
                                       self.seed + start)
            for i, g in zip(idx, gens):
                out[i] = g.text
        return out


# ---------------------------------------------------------------------------
# targeted inference


@dataclass
class EvalReport:
    branch_acc: float
    branch_overlap: float
    pass_at_1: float
    branch_cov: float
    per_program: dict = field(default_factory=dict)
    fingerprint: str = ""

    def metrics(self) -> dict:
        return {"branch_acc": self.branch_acc, "branch_overlap": self.branch_overlap,
                "pass_at_1": self.pass_at_1, "branch_cov": self.branch_cov}

    def to_text(self) -> str:
        lines = [f"fingerprint {self.fingerprint}"]
        lines += [f"{k} {v!r}" for k, v in self.metrics().items()]
        for name, row in sorted(self.per_program.items()):
            lines.append("program " + name + " " + " ".join(f"{k}={v!r}" for k, v in row.items()))
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        rows = [("metric", "value")] + [(k, f"{v:.4f}") for k, v in self.metrics().items()]
        return "\n".join(f"{a:<16}{b}" for a, b in rows) + "\n"


@dataclass
class InferenceResult:
    suites: dict[str, list[GenerationOutcome]]
    scored: list[tuple[Branch, GenerationOutcome]]
    branch_sets: dict[str, list[str]]
    report: EvalReport


def select_targets(corpus: Corpus, programs: Sequence[str], delta: int = 1000, loop_bound: int = 2,
                   count_infeasible: bool = False, branch_cap: int = 1000) -> dict[str, list[Target]]:
    """Branches to generate for, per program.

    Paths are enumerated statically; unless ``count_infeasible`` is set, only
    branches with a curated witness are kept.  ``delta`` then caps the number
    processed per program.
    """
    by_id: dict[str, dict[str, DatasetRecord]] = {}
    for r in corpus.records:
        by_id.setdefault(r.program_ref, {})[r.branch.branch_id] = r
    out = {}
    for name in sorted(programs):
        bset = enumerate_branches(corpus.cpg(name), loop_bound, max(branch_cap, delta))
        known = by_id.get(name, {})
        targets = [Target(name, b, known.get(b.branch_id)) for b in bset
                   if count_infeasible or b.branch_id in known]
        out[name] = targets[:delta]
    return out


def run_targeted_inference(generator: TestGenerator, corpus: Corpus, programs: Sequence[str],
                           delta: int = 1000, count_infeasible: bool = False, loop_bound: int = 2,
                           fingerprint: str = "") -> InferenceResult:
    """Generate one test per targeted branch, execute each and score the lot."""
    targets = select_targets(corpus, programs, delta, loop_bound, count_infeasible)
    flat = [t for name in sorted(targets) for t in targets[name]]
    texts = generator(flat) if flat else []
    suites: dict[str, list[GenerationOutcome]] = {name: [] for name in targets}
    scored: list[tuple[Branch, GenerationOutcome]] = []
    per_target = []
    for t, text in zip(flat, texts):
        outcome = run_test(corpus.programs[t.program], t.record_id, text)
        suites[t.program].append(outcome)
        per_target.append((t, outcome))
        if t.record is not None:
            scored.append((t.branch, outcome))
    branch_sets = {name: [t.branch.branch_id for t in ts] for name, ts in targets.items() if ts}
    per_program = {}
    for name, ts in targets.items():
        if not ts:
            continue
        rows = [(t.branch, o) for t, o in per_target if t.program == name]
        per_program[name] = {
            "targets": len(ts),
            "branch_acc": branch_acc(rows),
            "branch_overlap": branch_overlap(rows),
            "pass_at_1": pass_at_1(rows),
            "branch_cov": branch_cov({name: suites[name]}, {name: branch_sets[name]}),
        }
    all_rows = [(t.branch, o) for t, o in per_target]
    report = EvalReport(branch_acc(scored), branch_overlap(scored), pass_at_1(all_rows),
                        branch_cov({k: v for k, v in suites.items() if k in branch_sets}, branch_sets),
                        per_program, fingerprint)
    return InferenceResult(suites, scored, branch_sets, report)


def write_plot_data(report: EvalReport, path):
    """One line per (metric, program, value); aggregate rows use program ``*``."""
    lines = ["metric\tprogram\tvalue"]
    for metric, value in report.metrics().items():
        lines.append(f"{metric}\t*\t{value!r}")
        for name, row in sorted(report.per_program.items()):
            lines.append(f"{metric}\t{name}\t{row[metric]!r}")
    atomic_write(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# ablation matrix


@dataclass(frozen=True)
class Cell:
    label: str
    axis: str
    variant: Variant
    branch_agg: BranchAgg


ABLATION_CELLS = (
    Cell("Attention", "structure", Variant.ATTENTION, BranchAgg.NODE_STACK),
    Cell("MeanSample", "structure", Variant.MEAN_SAMPLE, BranchAgg.NODE_STACK),
    Cell("None (FT)", "structure", Variant.NONE, BranchAgg.NODE_STACK),
    Cell("NodeStack", "embedding", Variant.ATTENTION, BranchAgg.NODE_STACK),
    Cell("GraphPool", "embedding", Variant.ATTENTION, BranchAgg.GRAPH_POOL),
)


def corpus_fingerprint(corpus: Corpus) -> str:
    h = hashlib.sha1()
    for name in sorted(corpus.programs):
        h.update(name.encode() + b"\0" + corpus.programs[name].text.encode() + b"\0")
    for r in corpus.records:
        h.update(json.dumps(r.to_json(), sort_keys=True).encode())
    return h.hexdigest()[:16]


def config_fingerprint(config) -> str:
    def enc(o):
        if hasattr(o, "value"):
            return o.value
        raise TypeError(type(o))
    blob = json.dumps(asdict(config), sort_keys=True, default=enc)
    return hashlib.sha1(blob.encode()).hexdigest()[:16]


@dataclass
class AblationTable:
    cells: list[tuple[Cell, dict[int, dict]]]

    def mean(self, label: str, metric: str = "branch_acc") -> float:
        for cell, runs in self.cells:
            if cell.label == label:
                return sum(r[metric] for r in runs.values()) / len(runs)
        raise KeyError(label)

    def to_table(self) -> str:
        seeds = sorted({s for _, runs in self.cells for s in runs})
        head = f"{'axis':<11}{'cell':<12}{'BranchAcc':>10}{'BranchCov':>10}  " + " ".join(f"s{s}" for s in seeds)
        out = [head]
        for cell, runs in self.cells:
            per = " ".join(f"{runs[s]['branch_acc']:.3f}" for s in seeds if s in runs)
            out.append(f"{cell.axis:<11}{cell.label:<12}{self.mean(cell.label):>10.4f}"
                       f"{self.mean(cell.label, 'branch_cov'):>10.4f}  {per}")
        return "\n".join(out) + "\n"


def ablation_config(**overrides):
    """Training setup used for the ablation study: default architecture, lr 1e-3."""
    from .trainer import TrainConfig
    return TrainConfig(**{"steps": 2000, "lr": 1e-3, "val_every": 200, **overrides})


def run_ablation_matrix(corpus: Corpus, base_config, seeds: Sequence[int], cache_dir=None,
                        cells: Sequence[Cell] = ABLATION_CELLS, delta: int = 1000,
                        split: str = "test",
                        trainer: Optional[Callable] = None) -> AblationTable:
    """Train and evaluate every cell for every seed, reusing cached runs.

    Cells sharing a configuration (the default structure appears on both
    axes) share one training run.  Results are cached under ``cache_dir``
    keyed by corpus, configuration and seed.
    """
    from .trainer import train
    trainer = trainer or train
    if not seeds:
        raise ValueError("need at least one seed")
    cfp = corpus_fingerprint(corpus)
    programs = corpus.split_programs(split)
    memo: dict[str, dict] = {}
    rows = []
    for cell in cells:
        runs = {}
        for seed in seeds:
            gcfg = replace(base_config.gnn_config, variant=cell.variant, branch_agg=cell.branch_agg)
            cfg = replace(base_config, seed=seed, gnn_config=gcfg)
            key = f"{cfp}-{config_fingerprint(cfg)}"
            if key not in memo:
                memo[key] = _cached_run(corpus, cfg, key, cache_dir, programs, delta, trainer)
            runs[seed] = memo[key]
        rows.append((cell, runs))
    return AblationTable(rows)


def _cached_run(corpus, cfg, key, cache_dir, programs, delta, trainer) -> dict:
    path = Path(cache_dir) / f"{key}.json" if cache_dir is not None else None
    if path is not None and path.exists():
        return json.loads(path.read_text())
    run_dir = Path(cache_dir) / key if cache_dir is not None else None
    log.info("training %s", key)
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    report, model = trainer(corpus, cfg, out_dir=run_dir)
    t0 = time.time()
    result = run_targeted_inference(ModelGenerator(model, corpus), corpus, programs, delta,
                                    fingerprint=key)
    out = {**result.report.metrics(), "best_step": report.best_step, "wall_time": report.wall_time,
           "eval_time": time.time() - t0, "val_losses": report.val_losses,
           "variant": cfg.gnn_config.variant.value, "branch_agg": cfg.gnn_config.branch_agg.value,
           "seed": cfg.seed}
    if path is not None:
        atomic_write(run_dir / "eval_report.txt", result.report.to_text())
        atomic_write(path, json.dumps(out, sort_keys=True, indent=1) + "\n")
    return out
