"""Tracing interpreter for MiniLang and bounded enumeration of CFG paths."""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

from .minilang import SourceProgram, TestCase, Tree, Value, format_value, parse, tokenize

DEFAULT_STEP_LIMIT = 10_000


class Outcome(str, enum.Enum):
    PASSED = "Passed"
    ASSERTION_FAILED = "AssertionFailed"
    RUNTIME_ERROR = "RuntimeError"
    STEP_LIMIT = "StepLimitExceeded"


class EmptyTrace(Exception):
    pass


class MiniRuntimeError(Exception):
    """Raised inside the interpreter; surfaces as Outcome.RUNTIME_ERROR."""


class _StepLimit(Exception):
    pass


class _Return(Exception):
    def __init__(self, value):
        self.value = value


@dataclass
class ExecutionTrace:
    events: list[tuple[int, int]] = field(default_factory=list)
    outcome: Outcome = Outcome.PASSED
    returned: Optional[Value] = None
    error: Optional[str] = None

    def dump(self) -> str:
        lines = [f"{nid}:{line}" for nid, line in self.events]
        lines.append(f"outcome:{self.outcome.value}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Branch:
    path: tuple[int, ...]
    line_set: frozenset[int]
    line_path: tuple[int, ...]

    @property
    def branch_id(self) -> str:
        return path_id(self.path)


@dataclass
class BranchSet:
    branches: list[Branch]

    @property
    def total(self) -> int:
        return len(self.branches)

    def ids(self) -> list[str]:
        return [b.branch_id for b in self.branches]

    def __iter__(self):
        return iter(self.branches)

    def __len__(self):
        return len(self.branches)


def path_id(path) -> str:
    return hashlib.sha1(",".join(map(str, path)).encode()).hexdigest()[:16]


def make_branch(path, lines_of: dict[int, int]) -> Branch:
    path = tuple(path)
    line_path = tuple(lines_of[n] for n in path)
    return Branch(path, frozenset(line_path), line_path)


# ---------------------------------------------------------------------------
# compilation of the AST into closures


def _is_int(v) -> bool:
    return type(v) is int


def _need_int(v, op):
    if type(v) is not int:
        raise MiniRuntimeError(f"operator {op!r} expects integers, got {format_value(v)}")
    return v


def _need_bool(v, what):
    if type(v) is not bool:
        raise MiniRuntimeError(f"{what} expects a boolean, got {format_value(v)}")
    return v


def _arith(op):
    if op == "+":
        return lambda a, b: _need_int(a, op) + _need_int(b, op)
    if op == "-":
        return lambda a, b: _need_int(a, op) - _need_int(b, op)
    if op == "*":
        return lambda a, b: _need_int(a, op) * _need_int(b, op)
    if op in ("//", "%"):
        def div(a, b):
            _need_int(a, op)
            if _need_int(b, op) == 0:
                raise MiniRuntimeError("division by zero")
            return a // b if op == "//" else a % b
        return div
    if op == "<":
        return lambda a, b: _need_int(a, op) < _need_int(b, op)
    if op == "<=":
        return lambda a, b: _need_int(a, op) <= _need_int(b, op)
    if op == "==":
        return lambda a, b: type(a) is type(b) and a == b
    if op == "!=":
        return lambda a, b: not (type(a) is type(b) and a == b)
    raise ValueError(op)


class Program:
    """A compiled MiniLang program; one instance may run many tests."""

    def __init__(self, tree: Tree):
        self.tree = tree
        self.funcs: dict[str, tuple[list[str], Callable]] = {}
        for fn in tree.functions():
            params = [p.name for p in tree.params(fn)]
            self.funcs[fn.name] = (params, self._block(tree.body(fn)))

    # expressions -> closures env -> value
    def _expr(self, n):
        tree = self.tree
        k = n.kind
        if k in ("IntLit", "BoolLit"):
            v = n.value
            return lambda env: v
        if k == "Var":
            name = n.name

            def var(env):
                try:
                    return env[name]
                except KeyError:
                    raise MiniRuntimeError(f"unbound variable {name!r}") from None
            return var
        if k == "UnaryOp":
            inner = self._expr(tree[n.children[0]])
            if n.op == "not":
                return lambda env: not _need_bool(inner(env), "not")
            return lambda env: -_need_int(inner(env), "-")
        if k == "BinOp":
            left = self._expr(tree[n.children[0]])
            right = self._expr(tree[n.children[1]])
            if n.op == "and":
                return lambda env: _need_bool(left(env), "and") and _need_bool(right(env), "and")
            if n.op == "or":
                return lambda env: _need_bool(left(env), "or") or _need_bool(right(env), "or")
            fn = _arith(n.op)
            return lambda env: fn(left(env), right(env))
        if k == "Call":
            args = [self._expr(c) for c in tree.child_nodes(n)]
            name = n.name
            return lambda env: self._call(name, [a(env) for a in args], env["$run"], False)
        raise ValueError(f"cannot evaluate {k}")

    def _block(self, block):
        stmts = [self._stmt(s) for s in self.tree.child_nodes(block)]

        def run(env):
            for s in stmts:
                s(env)
        return run

    def _stmt(self, n):
        tree = self.tree
        nid, line, k = n.id, n.line_start, n.kind
        if k == "Assign":
            value = self._expr(tree[n.children[0]])
            name = n.name

            def assign(env):
                env["$run"].step(nid, line, env)
                env[name] = value(env)
            return assign
        if k == "Return":
            value = self._expr(tree[n.children[0]])

            def ret(env):
                env["$run"].step(nid, line, env)
                raise _Return(value(env))
            return ret
        if k == "Call":
            call = self._expr(n)

            def call_stmt(env):
                env["$run"].step(nid, line, env)
                call(env)
            return call_stmt
        if k == "While":
            cond = self._expr(tree[n.children[0]])
            body = self._block(tree[n.children[1]])

            def loop(env):
                run = env["$run"]
                while True:
                    run.step(nid, line, env)
                    if not _need_bool(cond(env), "while"):
                        return
                    body(env)
            return loop
        if k == "If":
            arms = []
            kids = tree.child_nodes(n)
            arms.append((nid, line, self._expr(kids[0]), self._block(kids[1])))
            for arm in kids[2:]:
                if arm.kind == "Elif":
                    c, b = tree.child_nodes(arm)
                    arms.append((arm.id, arm.line_start, self._expr(c), self._block(b)))
                else:
                    arms.append((None, None, None, self._block(tree[arm.children[0]])))

            def branch(env):
                run = env["$run"]
                for aid, aline, cond, body in arms:
                    if cond is None:
                        body(env)
                        return
                    run.step(aid, aline, env)
                    if _need_bool(cond(env), "if"):
                        body(env)
                        return
            return branch
        raise ValueError(f"not a statement: {k}")

    def _call(self, name, args, run, traced):
        if name not in self.funcs:
            raise MiniRuntimeError(f"unknown function {name!r}")
        params, body = self.funcs[name]
        if len(params) != len(args):
            raise MiniRuntimeError(f"{name} expects {len(params)} arguments, got {len(args)}")
        run.depth += 1
        if run.depth > 64:
            raise MiniRuntimeError("call depth exceeded")
        env = dict(zip(params, args))
        env["$run"] = run
        env["$traced"] = traced
        try:
            body(env)
        except _Return as r:
            return r.value
        finally:
            run.depth -= 1
        raise MiniRuntimeError(f"{name} finished without returning")

    def run(self, name: str, args, step_limit: int = DEFAULT_STEP_LIMIT) -> ExecutionTrace:
        run = _Run(step_limit)
        trace = run.trace
        try:
            trace.returned = self._call(name, list(args), run, True)
        except MiniRuntimeError as e:
            trace.outcome = Outcome.RUNTIME_ERROR
            trace.error = str(e)
        except _StepLimit:
            trace.outcome = Outcome.STEP_LIMIT
            trace.error = f"more than {step_limit} steps"
        except RecursionError:
            trace.outcome = Outcome.RUNTIME_ERROR
            trace.error = "recursion too deep"
        return trace


class _Run:
    __slots__ = ("trace", "limit", "steps", "depth")

    def __init__(self, limit):
        self.trace = ExecutionTrace()
        self.limit = limit
        self.steps = 0
        self.depth = 0

    def step(self, nid, line, env):
        self.steps += 1
        if env["$traced"]:
            self.trace.events.append((nid, line))
            if len(self.trace.events) > self.limit:
                raise _StepLimit()
        elif self.steps > 20 * self.limit:
            raise _StepLimit()


@lru_cache(maxsize=512)
def compile_text(text: str) -> Program:
    return Program(parse(tokenize(text)))


def execute(program: SourceProgram, test: TestCase, step_limit: int = DEFAULT_STEP_LIMIT) -> ExecutionTrace:
    """Run ``test`` against ``program`` and record the executed statements.

    Only statements of the called function are recorded; helpers run
    untraced.  A failing assertion keeps the full trace.
    """
    if step_limit < 1:
        raise ValueError("step_limit must be >= 1")
    compiled = compile_text(program.text)
    trace = compiled.run(test.call_target, test.args, step_limit)
    if trace.outcome is Outcome.PASSED:
        v = trace.returned
        if not (type(v) is type(test.expected) and v == test.expected):
            trace.outcome = Outcome.ASSERTION_FAILED
    return trace


def trace_to_branch(trace: ExecutionTrace) -> Branch:
    if not trace.events:
        raise EmptyTrace("trace has no events")
    path = tuple(n for n, _ in trace.events)
    line_path = tuple(line for _, line in trace.events)
    return Branch(path, frozenset(line_path), line_path)


# ---------------------------------------------------------------------------
# static enumeration


def enumerate_branches(cpg, loop_bound: int = 2, cap: int = 1000, entry: int = 0) -> BranchSet:
    """Depth-first enumeration of CFG paths from the function entry to a sink.

    Each While body is entered at most ``loop_bound`` times per visit of the
    loop; successors are explored in edge order, so the first path takes the
    true arm of every decision.
    """
    succ = cpg.cfg_successors()
    kinds = [n.kind for n in cpg.nodes]
    lines_of = {n.id: n.line_start for n in cpg.nodes}
    branches: list[Branch] = []
    start = succ.get(entry, [])
    if not start:
        return BranchSet([])

    # explicit stack of (node, path, loop counters); pushed in reverse edge order
    stack = [(start[0], (start[0],), ())]
    while stack and len(branches) < cap:
        node, path, counts = stack.pop()
        nexts = succ.get(node, [])
        if kinds[node] == "Return" or not nexts:
            branches.append(make_branch(path, lines_of))
            continue
        options = []
        if kinds[node] == "While":
            body, *exit_ = nexts
            used = dict(counts).get(node, 0)
            if used < loop_bound:
                options.append((body, _bump(counts, node, used + 1)))
            for e in exit_:
                options.append((e, _bump(counts, node, 0)))
        else:
            options = [(s, counts) for s in nexts]
        for s, c in reversed(options):
            stack.append((s, path + (s,), c))
    return BranchSet(branches)


def _bump(counts, node, value):
    d = dict(counts)
    if value:
        d[node] = value
    else:
        d.pop(node, None)
    return tuple(sorted(d.items()))
