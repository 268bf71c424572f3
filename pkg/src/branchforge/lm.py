"""Closed-vocabulary decoder-only language model with graph-slot injection."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .corpus import (BOOL_PARAMS, FUNC_NAMES, GRAPH_PAD, HELPERS, INT_PARAMS, LOCALS, LOOP_VAR,
                     N_GRAPH_SLOTS, NOT_AVAILABLE, PROMPT_HEADER, SECTION_BRANCH, SECTION_GRAPH,
                     SECTION_INVOKE, SECTION_SOURCE)
from .minilang import KEYWORDS, OPERATORS, LexError, tokenize
from .numerics import ParameterStore, Tensor

PAD, BOS, EOS, SEP = "<pad>", "<bos>", "<eos>", "<sep>"
NOT_AVAILABLE_TOKEN = "<not_available>"
SPECIALS = [PAD, BOS, EOS, GRAPH_PAD, NOT_AVAILABLE_TOKEN, SEP]
SECTION_MARKERS = {
    PROMPT_HEADER: "<instruction>",
    SECTION_SOURCE: "<source>",
    SECTION_BRANCH: "<branch>",
    SECTION_GRAPH: "<graph>",
    SECTION_INVOKE: "<invocation>",
}
LAYOUT_TOKENS = {"NEWLINE": "<nl>", "INDENT": "<indent>", "DEDENT": "<dedent>"}
DIGITS = [str(i) for i in range(10)]
MAX_VOCAB = 512
NEG = -1e9


class UnknownToken(KeyError):
    pass


class SlotMismatch(ValueError):
    pass


class SequenceTooLong(ValueError):
    pass


def _identifier_pool() -> list[str]:
    names = FUNC_NAMES + INT_PARAMS + BOOL_PARAMS + LOCALS + [LOOP_VAR] + list(HELPERS)
    names += ["v", "lines", "path", "_"]
    names += [chr(c) for c in range(ord("a"), ord("z") + 1)]
    return list(dict.fromkeys(names))


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        if len(tokens) > MAX_VOCAB:
            raise ValueError(f"vocabulary of {len(tokens)} exceeds {MAX_VOCAB}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate vocabulary entries")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.pad_id = self.index[PAD]
        self.bos_id = self.index[BOS]
        self.eos_id = self.index[EOS]
        self.sep_id = self.index[SEP]
        self.graph_pad_id = self.index[GRAPH_PAD]
        self.not_available_id = self.index[NOT_AVAILABLE_TOKEN]

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise UnknownToken(token) from None

    @classmethod
    def default(cls) -> "Vocab":
        return _default_vocab()


@lru_cache(maxsize=1)
def _default_vocab() -> Vocab:
    toks = SPECIALS + list(SECTION_MARKERS.values()) + list(LAYOUT_TOKENS.values())
    toks += list(KEYWORDS) + [lexeme for lexeme, _ in OPERATORS] + DIGITS + _identifier_pool()
    return Vocab(list(dict.fromkeys(toks)))


# ---------------------------------------------------------------------------
# encoding


@dataclass(frozen=True)
class PromptEncoding:
    ids: np.ndarray
    graph_slot_positions: tuple[int, ...]
    target_span: Optional[tuple[int, int]] = None

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def mask_available(self) -> bool:
        return bool(self.graph_slot_positions)


def _code_tokens(text: str) -> list[str]:
    try:
        toks = tokenize(text)
    except LexError as e:
        raise UnknownToken(str(e)) from None
    out: list[str] = []
    for t in toks:
        if t.kind in LAYOUT_TOKENS:
            out.append(LAYOUT_TOKENS[t.kind])
        elif t.kind == "INT":
            out.extend(t.lexeme)
        else:
            out.append(t.lexeme)
    return out


def encode_prompt(prompt_text: str, test_source: Optional[str] = None,
                  vocab: Optional[Vocab] = None) -> PromptEncoding:
    """Token ids for a rendered prompt, optionally followed by a target test.

    Layout: BOS, then per section its marker, body tokens and a newline, then
    SEP.  With ``test_source`` the test tokens and EOS follow SEP and form the
    target span.
    """
    vocab = vocab or Vocab.default()
    toks = [BOS]
    lines = prompt_text.rstrip("\n").split("\n")
    i = 0
    while i < len(lines):
        marker = SECTION_MARKERS.get(lines[i])
        if marker is None:
            raise UnknownToken(f"unexpected prompt line {lines[i]!r}")
        toks.append(marker)
        j = i + 1
        while j < len(lines) and lines[j] not in SECTION_MARKERS:
            j += 1
        body = lines[i + 1:j]
        if marker == "<graph>":
            for line in body:
                if line == NOT_AVAILABLE:
                    toks.append(NOT_AVAILABLE_TOKEN)
                else:
                    for word in line.split():
                        if word != GRAPH_PAD:
                            raise UnknownToken(word)
                        toks.append(GRAPH_PAD)
        elif body:
            toks.extend(_code_tokens("\n".join(body)))
        toks.append(LAYOUT_TOKENS["NEWLINE"])
        i = j
    toks.append(SEP)
    span = None
    if test_source is not None:
        start = len(toks)
        toks.extend(_code_tokens(test_source.strip()))
        toks.append(EOS)
        span = (start, len(toks))
    ids = np.array([vocab.id(t) for t in toks], dtype=np.int64)
    slots = tuple(int(p) for p in np.flatnonzero(ids == vocab.graph_pad_id))
    if slots and len(slots) != N_GRAPH_SLOTS:
        raise SlotMismatch(f"expected {N_GRAPH_SLOTS} graph slots, found {len(slots)}")
    return PromptEncoding(ids, slots, span)


def detokenize(ids: Sequence[int], vocab: Optional[Vocab] = None) -> str:
    """Render generated test tokens as canonical check text.

    Digits fuse into integers and commas take a trailing space; any token that
    cannot appear in a check line is emitted verbatim so parsing fails.
    """
    vocab = vocab or Vocab.default()
    out = []
    for i in ids:
        t = vocab.tokens[int(i)]
        if t == EOS:
            break
        if t in ("check",):
            out.append(t + " ")
        elif t == ",":
            out.append(", ")
        elif t == "==":
            out.append(" == ")
        else:
            out.append(t)
    return "".join(out)


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class LmConfig:
    layers: int = 4
    d_model: int = 64
    heads: int = 4
    max_seq: int = 512
    dropout: float = 0.0
    d_h: int = 64
    use_projection: bool = False
    ffn_mult: int = 4

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.dropout != 0.0:
            raise ValueError("dropout is not supported")
        if not self.use_projection and self.d_h != self.d_model:
            raise ValueError("d_model must equal d_h unless use_projection is set")


def init_lm_params(store: ParameterStore, cfg: LmConfig, vocab_size: int, rng: np.random.Generator,
                   prefix: str = "lm."):
    d, f = cfg.d_model, cfg.d_model * cfg.ffn_mult
    store.add(prefix + "tok", nx.init_normal(rng, (vocab_size, d), 0.02))
    store.add(prefix + "pos", nx.init_normal(rng, (cfg.max_seq, d), 0.02))
    resid_std = 0.02 / np.sqrt(2 * cfg.layers)
    for layer in range(cfg.layers):
        p = f"{prefix}{layer}."
        store.add(p + "ln1_g", np.ones(d))
        store.add(p + "ln1_b", np.zeros(d))
        store.add(p + "qkv", nx.init_normal(rng, (d, 3 * d), 0.02))
        store.add(p + "qkv_b", np.zeros(3 * d))
        store.add(p + "o", nx.init_normal(rng, (d, d), resid_std))
        store.add(p + "o_b", np.zeros(d))
        store.add(p + "ln2_g", np.ones(d))
        store.add(p + "ln2_b", np.zeros(d))
        store.add(p + "fc1", nx.init_normal(rng, (d, f), 0.02))
        store.add(p + "fc1_b", np.zeros(f))
        store.add(p + "fc2", nx.init_normal(rng, (f, d), resid_std))
        store.add(p + "fc2_b", np.zeros(d))
    store.add(prefix + "lnf_g", np.ones(d))
    store.add(prefix + "lnf_b", np.zeros(d))
    store.add(prefix + "out", nx.init_normal(rng, (d, vocab_size), 0.02))
    store.add(prefix + "out_b", np.zeros(vocab_size))
    if cfg.use_projection:
        store.add(prefix + "graph_proj", nx.xavier(rng, cfg.d_h, d))


@lru_cache(maxsize=64)
def _causal_bias(t: int) -> np.ndarray:
    return np.triu(np.full((t, t), NEG), k=1)


def inject_graph_embeddings(token_embeddings: Tensor, graph_slot_positions: Sequence[int],
                            e_b: Optional[Tensor]) -> Tensor:
    """Replace the rows at the slot positions with the rows of ``e_b``."""
    n_rows = 0 if e_b is None else e_b.shape[0]
    if len(graph_slot_positions) != n_rows:
        raise SlotMismatch(f"{len(graph_slot_positions)} slots but {n_rows} embedding rows")
    if n_rows == 0:
        return token_embeddings
    if e_b.shape[1:] != token_embeddings.shape[1:]:
        raise SlotMismatch(f"embedding width {e_b.shape[1:]} vs {token_embeddings.shape[1:]}")
    return nx.scatter_rows(token_embeddings, list(graph_slot_positions), e_b)


def project_graph(e_b: Tensor, cfg: LmConfig, store: ParameterStore, prefix: str = "lm.") -> Tensor:
    return e_b @ store[prefix + "graph_proj"] if cfg.use_projection else e_b


def embed_batch(encodings: Sequence[PromptEncoding], graph_rows: Sequence[Optional[Tensor]],
                cfg: LmConfig, store: ParameterStore, vocab: Vocab, prefix: str = "lm.") -> Tensor:
    """Right-padded (B, T, d) input embeddings with graph rows substituted."""
    t_max = max(len(e) for e in encodings)
    ids = np.full((len(encodings), t_max), vocab.pad_id, dtype=np.int64)
    for b, enc in enumerate(encodings):
        ids[b, :len(enc)] = enc.ids
    emb = nx.embedding_lookup(store[prefix + "tok"], ids.reshape(-1))
    rows, values = [], []
    for b, (enc, e_b) in enumerate(zip(encodings, graph_rows)):
        n_rows = 0 if e_b is None else e_b.shape[0]
        if len(enc.graph_slot_positions) != n_rows:
            raise SlotMismatch(f"record {b}: {len(enc.graph_slot_positions)} slots, {n_rows} rows")
        if n_rows:
            rows.extend(b * t_max + p for p in enc.graph_slot_positions)
            values.append(project_graph(e_b, cfg, store, prefix))
    if values:
        emb = nx.scatter_rows(emb, rows, values[0] if len(values) == 1 else nx.concat(values, axis=0))
    return nx.reshape(emb, (len(encodings), t_max, cfg.d_model))


def lm_forward(e_inp: Tensor, cfg: LmConfig, store: ParameterStore, prefix: str = "lm.") -> Tensor:
    """Next-token logits for (T, d) or (B, T, d) input embeddings."""
    single = len(e_inp.shape) == 2
    x = nx.reshape(e_inp, (1,) + e_inp.shape) if single else e_inp
    bsz, t, d = x.shape
    if t > cfg.max_seq:
        raise SequenceTooLong(f"sequence of {t} tokens exceeds max_seq={cfg.max_seq}")
    h_, c = cfg.heads, d // cfg.heads
    x = x + store[prefix + "pos"][:t]
    bias = _causal_bias(t)
    scale = 1.0 / np.sqrt(c)
    for layer in range(cfg.layers):
        p = f"{prefix}{layer}."
        h = nx.layer_norm(x, store[p + "ln1_g"], store[p + "ln1_b"])
        qkv = h @ store[p + "qkv"] + store[p + "qkv_b"]
        qkv = nx.transpose(nx.reshape(qkv, (bsz, t, 3, h_, c)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        y = nx.reshape(nx.transpose(nx.attention(q, k, v, bias, scale), (0, 2, 1, 3)), (bsz, t, d))
        x = x + (y @ store[p + "o"] + store[p + "o_b"])
        h = nx.layer_norm(x, store[p + "ln2_g"], store[p + "ln2_b"])
        h = nx.relu(h @ store[p + "fc1"] + store[p + "fc1_b"])
        x = x + (h @ store[p + "fc2"] + store[p + "fc2_b"])
    x = nx.layer_norm(x, store[prefix + "lnf_g"], store[prefix + "lnf_b"])
    logits = x @ store[prefix + "out"] + store[prefix + "out_b"]
    return nx.reshape(logits, (t, logits.shape[-1])) if single else logits


def target_arrays(encodings: Sequence[PromptEncoding], t_max: Optional[int] = None):
    """Shifted targets and loss mask: position t predicts token t+1."""
    t_max = t_max or max(len(e) for e in encodings)
    targets = np.zeros((len(encodings), t_max), dtype=np.int64)
    mask = np.zeros((len(encodings), t_max))
    for b, enc in enumerate(encodings):
        if enc.target_span is None or enc.target_span[0] >= enc.target_span[1]:
            raise ValueError("encoding has no target span")
        n = len(enc)
        targets[b, :n - 1] = enc.ids[1:]
        s, e = enc.target_span
        mask[b, s - 1:e - 1] = 1.0
    return targets, mask


def training_loss(encodings, logits: Tensor) -> Tensor:
    """Mean cross-entropy over target-span predictions; prompt tokens are ignored."""
    if isinstance(encodings, PromptEncoding):
        encodings = [encodings]
        logits = nx.reshape(logits, (1,) + logits.shape)
    targets, mask = target_arrays(encodings, logits.shape[1])
    return nx.cross_entropy(logits, targets, mask)


# ---------------------------------------------------------------------------
# decoding


@dataclass(frozen=True)
class DecodeMode:
    temperature: float = 0.0  # 0 means greedy

    @classmethod
    def parse(cls, text: str) -> "DecodeMode":
        if text == "greedy":
            return cls(0.0)
        if text.startswith("temp:"):
            tau = float(text[5:])
            if tau <= 0:
                raise ValueError("temperature must be positive")
            return cls(tau)
        raise ValueError(f"unknown decode mode {text!r}")

    def __str__(self) -> str:
        return "greedy" if self.temperature == 0 else f"temp:{self.temperature:g}"


GREEDY = DecodeMode()


@dataclass
class Generation:
    ids: list[int] = field(default_factory=list)
    text: str = ""
    finished: bool = False


def decode_batch(encodings: Sequence[PromptEncoding], graph_rows: Sequence[Optional[Tensor]],
                 cfg: LmConfig, store: ParameterStore, vocab: Vocab, mode: DecodeMode = GREEDY,
                 max_new: int = 64, seed: int = 0, prefix: str = "lm.") -> list[Generation]:
    """Autoregressive generation for several prompts at once.

    Sequences grow right-padded, so each prompt reads its logits at its own
    last position; causal masking keeps the pad tail invisible.  Temperature
    sampling draws from one generator per prompt, seeded by ``seed`` and the
    prompt's index.
    """
    gens = [Generation() for _ in encodings]
    rngs = [np.random.default_rng([seed, i]) for i in range(len(encodings))]
    with nx.no_grad():
        seqs = [list(e.ids) for e in encodings]
        for _ in range(max_new):
            live = [i for i, g in enumerate(gens) if not g.finished]
            if not live:
                break
            if max(len(seqs[i]) for i in live) > cfg.max_seq:
                for i in live:
                    if len(seqs[i]) > cfg.max_seq:
                        gens[i].finished = True
                live = [i for i in live if not gens[i].finished]
                if not live:
                    break
            encs = [PromptEncoding(np.array(seqs[i]), encodings[i].graph_slot_positions) for i in live]
            x = embed_batch(encs, [graph_rows[i] for i in live], cfg, store, vocab, prefix)
            logits = lm_forward(x, cfg, store, prefix).data
            for row, i in enumerate(live):
                z = logits[row, len(seqs[i]) - 1]
                if mode.temperature == 0:
                    tok = int(np.argmax(z))
                else:
                    pz = z / mode.temperature
                    pz = np.exp(pz - pz.max())
                    tok = int(rngs[i].choice(len(pz), p=pz / pz.sum()))
                gens[i].ids.append(tok)
                seqs[i].append(tok)
                if tok == vocab.eos_id or len(seqs[i]) >= cfg.max_seq:
                    gens[i].finished = True
    for g in gens:
        g.text = detokenize(g.ids, vocab)
    return gens
