"""Code property graph over a MiniLang tree: AST, CFG and DFG relations."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable

import numpy as np

from .minilang import KIND_CODE, LAYOUT, AstNode, SourceProgram, Tree

AST, CFG, DFG = 0, 1, 2
RELATIONS = ("AST", "CFG", "DFG")
N_RELATIONS = 3

TOKEN_DIMS = 64
KIND_DIMS = 12
POS_DIMS = 4
FEATURE_DIM = TOKEN_DIMS + KIND_DIMS + POS_DIMS
HASH_SEED = b"branchforge"

CPG_FORMAT_VERSION = 1


class LineOutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class CpgNode:
    id: int
    kind: str
    kind_code: int
    line_start: int
    line_end: int
    order: int
    features: np.ndarray = field(repr=False, compare=False)


@dataclass
class Cpg:
    nodes: list[CpgNode]
    edges_by_relation: list[list[tuple[int, int]]]
    line_count: int

    @cached_property
    def node_feature_matrix(self) -> np.ndarray:
        if not self.nodes:
            return np.zeros((0, FEATURE_DIM))
        return np.stack([n.features for n in self.nodes])

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def cfg_successors(self) -> dict[int, list[int]]:
        succ: dict[int, list[int]] = {}
        for s, d in self.edges_by_relation[CFG]:
            succ.setdefault(s, []).append(d)
        return succ

    @cached_property
    def adjacency(self) -> np.ndarray:
        """Symmetric 0/1 adjacency per relation, shape (r, |V|, |V|)."""
        n = len(self.nodes)
        adj = np.zeros((N_RELATIONS, n, n))
        for j, edges in enumerate(self.edges_by_relation):
            for s, d in edges:
                adj[j, s, d] = 1.0
                adj[j, d, s] = 1.0
        return adj


@dataclass
class BranchMask:
    bits: np.ndarray  # int8 vector of length |V|

    @property
    def active_count(self) -> int:
        return int(self.bits.sum())

    @property
    def available(self) -> bool:
        return self.active_count > 0

    def nodes(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.bits)]

    def to_rle(self) -> str:
        """Run-length encoding, e.g. ``0x3,1x2``."""
        runs = []
        bits = self.bits.tolist()
        i = 0
        while i < len(bits):
            j = i
            while j < len(bits) and bits[j] == bits[i]:
                j += 1
            runs.append(f"{bits[i]}x{j - i}")
            i = j
        return ",".join(runs)

    @classmethod
    def from_rle(cls, text: str) -> "BranchMask":
        bits: list[int] = []
        for run in filter(None, text.split(",")):
            b, n = run.split("x")
            bits += [int(b)] * int(n)
        return cls(np.array(bits, dtype=np.int8))


# ---------------------------------------------------------------------------
# features


def _bucket(lexeme: str) -> int:
    h = hashlib.blake2b(lexeme.encode(), digest_size=8, key=HASH_SEED).digest()
    return int.from_bytes(h, "little") % TOKEN_DIMS


def _slice_tokens(tree: Tree, node: AstNode) -> list[str]:
    """Lexemes owned by ``node``: its token range minus nested blocks and functions."""
    holes = []
    for d in tree.walk(node.id):
        if d.id != node.id and d.kind in ("Block", "FuncDef"):
            holes.append((d.tok_start, d.tok_end))
    if node.kind == "Block":
        return []
    out = []
    for i in range(node.tok_start, node.tok_end):
        if any(a <= i < b for a, b in holes):
            continue
        tok = tree.tokens[i]
        if tok.kind not in LAYOUT:
            out.append(tok.lexeme)
    return out


def encode_node_features(node: AstNode, program: SourceProgram, tree: Tree) -> np.ndarray:
    """80-dim vector: hashed token bag | kind one-hot | order, lines, depth."""
    x = np.zeros(FEATURE_DIM)
    for lexeme in _slice_tokens(tree, node):
        x[_bucket(lexeme)] += 1.0
    norm = np.linalg.norm(x[:TOKEN_DIMS])
    if norm > 0:
        x[:TOKEN_DIMS] /= norm
    code = KIND_CODE[node.kind]
    if code < KIND_DIMS:
        x[TOKEN_DIMS + code] = 1.0
    base = TOKEN_DIMS + KIND_DIMS
    x[base] = min(node.order / 32.0, 1.0)
    x[base + 1] = node.line_start / program.line_count
    x[base + 2] = node.line_end / program.line_count
    x[base + 3] = min(tree.depth(node.id) / 16.0, 1.0)
    return x


# ---------------------------------------------------------------------------
# control flow


def _cfg_edges(tree: Tree) -> list[tuple[int, int]]:
    edges: list[tuple[int, int]] = []

    def link(block: AstNode, follow):
        stmts = tree.child_nodes(block)
        for i, s in enumerate(stmts):
            nxt = stmts[i + 1].id if i + 1 < len(stmts) else follow
            visit(s, nxt)

    def visit(s: AstNode, nxt):
        k = s.kind
        if k in ("Assign", "Call"):
            if nxt is not None:
                edges.append((s.id, nxt))
        elif k == "Return":
            pass
        elif k == "While":
            body = tree[s.children[1]]
            edges.append((s.id, body.children[0]))
            if nxt is not None:
                edges.append((s.id, nxt))
            link(body, s.id)
        elif k == "If":
            kids = tree.child_nodes(s)
            # decision chain: If, then each Elif; an Else is not a decision
            deciders = [(s, kids[1])]
            else_block = None
            for arm in kids[2:]:
                if arm.kind == "Elif":
                    deciders.append((arm, tree[arm.children[1]]))
                else:
                    else_block = tree[arm.children[0]]
            for i, (dec, blk) in enumerate(deciders):
                edges.append((dec.id, blk.children[0]))
                if i + 1 < len(deciders):
                    false_target = deciders[i + 1][0].id
                elif else_block is not None:
                    false_target = else_block.children[0]
                else:
                    false_target = nxt
                if false_target is not None:
                    edges.append((dec.id, false_target))
                link(blk, nxt)
            if else_block is not None:
                link(else_block, nxt)
        else:
            raise ValueError(f"unexpected statement {k}")

    for fn in tree.functions():
        body = tree.body(fn)
        edges.append((fn.id, body.children[0]))
        link(body, None)
    return edges


def _statement_of(tree: Tree) -> dict[int, int]:
    """Map every expression node to the statement (or decision) that evaluates it."""
    owner: dict[int, int] = {}
    for n in tree.nodes:
        if tree.is_statement(n):
            roots = [tree[c] for c in n.children if tree[c].kind not in ("Block", "Elif", "Else")]
            if n.kind == "Call":
                roots = tree.child_nodes(n)
            for r in roots:
                for d in tree.walk(r.id):
                    owner[d.id] = n.id
    return owner


def _dfg_edges(tree: Tree, cfg: list[tuple[int, int]]) -> list[tuple[int, int]]:
    """Reaching definitions over the statement-level CFG of each function."""
    preds: dict[int, list[int]] = {}
    for s, d in cfg:
        preds.setdefault(d, []).append(s)
    owner = _statement_of(tree)
    uses: dict[int, list[AstNode]] = {}
    for n in tree.nodes:
        if n.kind == "Var" and n.id in owner:
            uses.setdefault(owner[n.id], []).append(n)

    edges: set[tuple[int, int]] = set()
    for fn in tree.functions():
        # def sites: params (generated at the FuncDef entry) and assignments
        def_var: dict[int, str] = {p.id: p.name for p in tree.params(fn)}
        body_nodes = [n for n in tree.walk(tree.body(fn).id) if tree.is_statement(n)]
        for n in body_nodes:
            if n.kind == "Assign":
                def_var[n.id] = n.name
        gen = {fn.id: frozenset(p.id for p in tree.params(fn))}
        for n in body_nodes:
            gen[n.id] = frozenset([n.id]) if n.kind == "Assign" else frozenset()
        nodes = [fn.id] + [n.id for n in body_nodes]
        out = {n: frozenset() for n in nodes}
        in_ = {n: frozenset() for n in nodes}
        changed = True
        while changed:
            changed = False
            for n in nodes:
                new_in = frozenset().union(*(out[p] for p in preds.get(n, [])))
                if n != fn.id and tree[n].kind == "Assign":
                    killed = {d for d in new_in if def_var[d] == tree[n].name}
                    new_out = gen[n] | (new_in - killed)
                else:
                    new_out = gen[n] | new_in
                if new_in != in_[n] or new_out != out[n]:
                    in_[n], out[n] = new_in, new_out
                    changed = True
        for n in nodes[1:]:
            for use in uses.get(n, []):
                for d in in_[n]:
                    if def_var[d] == use.name:
                        edges.add((d, use.id))
    return sorted(edges)


def build_cpg(tree: Tree, program: SourceProgram) -> Cpg:
    nodes = [
        CpgNode(n.id, n.kind, KIND_CODE[n.kind], n.line_start, n.line_end, n.order,
                encode_node_features(n, program, tree))
        for n in tree.nodes
    ]
    ast = [(n.id, c) for n in tree.nodes for c in n.children]
    cfg = _cfg_edges(tree)
    dfg = _dfg_edges(tree, cfg)
    return Cpg(nodes, [ast, cfg, dfg], program.line_count)


def derive_branch_mask(cpg: Cpg, branch_lines: Iterable[int]) -> BranchMask:
    """Mark every node whose line span intersects ``branch_lines``."""
    lines = sorted(set(branch_lines))
    for ln in lines:
        if not 1 <= ln <= cpg.line_count:
            raise LineOutOfRange(f"line {ln} outside 1..{cpg.line_count}")
    bits = np.zeros(len(cpg.nodes), dtype=np.int8)
    if lines:
        arr = np.array(lines)
        for n in cpg.nodes:
            # any line in [start, end]
            i = np.searchsorted(arr, n.line_start)
            if i < len(arr) and arr[i] <= n.line_end:
                bits[n.id] = 1
    return BranchMask(bits)


# ---------------------------------------------------------------------------
# serialization


def dumps_cpg(cpg: Cpg) -> str:
    out = [json.dumps({"format_version": CPG_FORMAT_VERSION, "nodes": len(cpg.nodes),
                       "dim": FEATURE_DIM, "relations": N_RELATIONS, "line_count": cpg.line_count})]
    for n in cpg.nodes:
        out.append(json.dumps({"node": n.id, "kind": n.kind, "kind_code": n.kind_code,
                               "lines": [n.line_start, n.line_end], "order": n.order,
                               "x": [float(v).hex() for v in n.features]}))
    for j, edges in enumerate(cpg.edges_by_relation):
        for s, d in edges:
            out.append(json.dumps({"edge": RELATIONS[j], "src": s, "dst": d}))
    return "\n".join(out) + "\n"


def loads_cpg(text: str) -> Cpg:
    lines = text.splitlines()
    header = json.loads(lines[0])
    if header.get("format_version") != CPG_FORMAT_VERSION:
        raise ValueError(f"unsupported cpg format {header.get('format_version')}")
    nodes = []
    edges: list[list[tuple[int, int]]] = [[] for _ in range(header["relations"])]
    for line in lines[1:]:
        rec = json.loads(line)
        if "node" in rec:
            x = np.array([float.fromhex(v) for v in rec["x"]])
            nodes.append(CpgNode(rec["node"], rec["kind"], rec["kind_code"], rec["lines"][0],
                                 rec["lines"][1], rec["order"], x))
        else:
            edges[RELATIONS.index(rec["edge"])].append((rec["src"], rec["dst"]))
    if len(nodes) != header["nodes"]:
        raise ValueError("node count mismatch")
    return Cpg(nodes, edges, header["line_count"])
