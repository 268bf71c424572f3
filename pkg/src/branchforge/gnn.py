"""Heterogeneous message passing over a Cpg, producing branch embeddings.

Each layer computes one embedding per relation from the node itself plus its
neighbours under that relation, then averages (or sums) the relation outputs.
The self term goes through a projection shared by all relations and the
neighbour term through the relation's own matrix, so a relation without
edges contributes only the self term.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .cpg import FEATURE_DIM, N_RELATIONS, BranchMask, Cpg
from .numerics import ParameterStore, Tensor

N_SLOTS = 32
NEG = -1e9


class MaskUnavailable(ValueError):
    pass


class Variant(str, enum.Enum):
    ATTENTION = "attention"
    MEAN_SAMPLE = "mean"
    NONE = "none"


class RelationPool(str, enum.Enum):
    MEAN = "mean"
    SUM = "sum"


class BranchAgg(str, enum.Enum):
    NODE_STACK = "node"
    GRAPH_POOL = "pool"


@dataclass(frozen=True)
class GnnConfig:
    layers: int = 3
    d_h: int = 64
    heads: int = 8
    variant: Variant = Variant.ATTENTION
    relation_pool: RelationPool = RelationPool.MEAN
    branch_agg: BranchAgg = BranchAgg.NODE_STACK
    in_dim: int = FEATURE_DIM
    slots: int = N_SLOTS

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "relation_pool", RelationPool(self.relation_pool))
        object.__setattr__(self, "branch_agg", BranchAgg(self.branch_agg))
        if self.variant is Variant.ATTENTION and self.d_h % self.heads:
            raise ValueError(f"d_h={self.d_h} not divisible by heads={self.heads}")
        if self.layers < 1:
            raise ValueError("need at least one layer")


def init_gnn_params(store: ParameterStore, cfg: GnnConfig, rng: np.random.Generator, prefix: str = "gnn."):
    if cfg.variant is Variant.NONE:
        return
    for k in range(1, cfg.layers + 1):
        fan_in = cfg.in_dim if k == 1 else cfg.d_h
        p = f"{prefix}{k}."
        store.add(p + "self", nx.xavier(rng, fan_in, cfg.d_h))
        store.add(p + "bias", np.zeros(cfg.d_h))
        for j in range(N_RELATIONS):
            store.add(p + f"W{j}", nx.xavier(rng, fan_in, cfg.d_h))
            if cfg.variant is Variant.ATTENTION:
                c = cfg.d_h // cfg.heads
                store.add(p + f"a_dst{j}", rng.normal(0, 0.3, (cfg.heads, c)))
                store.add(p + f"a_src{j}", rng.normal(0, 0.3, (cfg.heads, c)))
    store.add(prefix + "ln_g", np.ones(cfg.d_h))
    store.add(prefix + "ln_b", np.zeros(cfg.d_h))
    store.add(prefix + "pad", rng.normal(0, 0.02, cfg.d_h))


def attention_weights(query: np.ndarray, neighbors: np.ndarray, a_dst: np.ndarray, a_src: np.ndarray,
                      slope: float = 0.2) -> np.ndarray:
    """Per-head softmax weights of one node over its self+neighbour set.

    ``query`` is (heads, c), ``neighbors`` is (m, heads, c) with the node
    itself among the rows; returns (heads, m) rows summing to one.
    """
    scores = (query * a_dst).sum(-1)[:, None] + np.einsum("mhc,hc->hm", neighbors, a_src)
    scores = np.where(scores > 0, scores, slope * scores)
    return nx.softmax(Tensor(scores), axis=-1).data


class _GraphConsts:
    """Per-graph constant matrices, computed once per Cpg."""

    def __init__(self, cpg: Cpg):
        n = cpg.num_nodes
        adj = cpg.adjacency
        self.n = n
        self.eye = np.eye(n)
        self.off = 1.0 - self.eye
        self.mask_bias = [np.where((adj[j] + self.eye) > 0, 0.0, NEG) for j in range(N_RELATIONS)]
        deg = adj.sum(-1, keepdims=True)
        self.mean_adj = [np.divide(adj[j], deg[j], out=np.zeros_like(adj[j]), where=deg[j] > 0)
                         for j in range(N_RELATIONS)]
        self.has_edges = [bool(adj[j].any()) for j in range(N_RELATIONS)]


def _consts(cpg: Cpg) -> _GraphConsts:
    c = cpg.__dict__.get("_gnn_consts")
    if c is None:
        c = _GraphConsts(cpg)
        cpg.__dict__["_gnn_consts"] = c
    return c


def _attention_relation(h: Tensor, self_val: Tensor, store, p: str, j: int, cfg: GnnConfig,
                        g: _GraphConsts) -> Tensor:
    n, heads, c = g.n, cfg.heads, cfg.d_h // cfg.heads
    if not g.has_edges[j]:
        return self_val
    nbr_val = h @ store[p + f"W{j}"]
    sv = nx.transpose(nx.reshape(self_val, (n, heads, c)), (1, 0, 2))  # (H, n, c)
    nv = nx.transpose(nx.reshape(nbr_val, (n, heads, c)), (1, 0, 2))
    a_dst = nx.reshape(store[p + f"a_dst{j}"], (heads, 1, c))
    a_src = nx.reshape(store[p + f"a_src{j}"], (heads, 1, c))
    s_dst = nx.sum_(sv * a_dst, axis=-1)          # (H, n)
    s_self = nx.sum_(sv * a_src, axis=-1)
    s_nbr = nx.sum_(nv * a_src, axis=-1)
    scores = (nx.reshape(s_dst, (heads, n, 1))
              + nx.reshape(s_nbr, (heads, 1, n)) * g.off
              + nx.reshape(s_self, (heads, n, 1)) * g.eye)
    alpha = nx.softmax(nx.leaky_relu(scores) + g.mask_bias[j], axis=-1)
    alpha_self = nx.sum_(alpha * g.eye, axis=-1, keepdims=True)   # (H, n, 1)
    out = (alpha * g.off) @ nv + alpha_self * sv                    # (H, n, c)
    return nx.reshape(nx.transpose(out, (1, 0, 2)), (n, cfg.d_h))


def node_embeddings(cpg: Cpg, cfg: GnnConfig, store: ParameterStore, prefix: str = "gnn.") -> Tensor:
    """Final-layer node states h^K, shape (|V|, d_h)."""
    g = _consts(cpg)
    h = Tensor(cpg.node_feature_matrix)
    for k in range(1, cfg.layers + 1):
        p = f"{prefix}{k}."
        self_val = h @ store[p + "self"]
        per_rel = []
        for j in range(N_RELATIONS):
            if cfg.variant is Variant.ATTENTION:
                agg = _attention_relation(h, self_val, store, p, j, cfg, g)
            else:
                agg = self_val
                if g.has_edges[j]:
                    agg = agg + Tensor(g.mean_adj[j]) @ (h @ store[p + f"W{j}"])
            per_rel.append(nx.leaky_relu(agg + store[p + "bias"]))
        pooled = per_rel[0]
        for t in per_rel[1:]:
            pooled = pooled + t
        if cfg.relation_pool is RelationPool.MEAN:
            pooled = pooled * (1.0 / N_RELATIONS)
        h = pooled
    return nx.layer_norm(h, store[prefix + "ln_g"], store[prefix + "ln_b"])


def gnn_forward(cpg: Cpg, mask: BranchMask, cfg: GnnConfig, store: ParameterStore,
                prefix: str = "gnn.") -> Tensor:
    """Branch embedding e_b with ``cfg.slots`` rows.

    NodeStack keeps the masked nodes with the smallest ids in ascending order
    and fills the remaining slots with the learned pad vector; GraphPool
    repeats the mean masked-node state in every slot.
    """
    if not mask.available:
        raise MaskUnavailable("branch mask has no active nodes")
    ids = mask.nodes()
    h = node_embeddings(cpg, cfg, store, prefix)
    if cfg.branch_agg is BranchAgg.GRAPH_POOL:
        pooled = nx.mean(h[np.array(ids)], axis=0, keepdims=True)
        return pooled[np.zeros(cfg.slots, dtype=np.int64)]
    ids = ids[: cfg.slots]
    rows = h[np.array(ids)]
    missing = cfg.slots - len(ids)
    if missing == 0:
        return rows
    pad = nx.reshape(store[prefix + "pad"], (1, cfg.d_h))
    return nx.concat([rows, pad[np.zeros(missing, dtype=np.int64)]], axis=0)
