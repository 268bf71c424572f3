"""The joint model: graph encoder feeding branch embeddings into the language model."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import gnn as gnn_mod
from . import lm
from . import numerics as nx
from .corpus import Corpus, DatasetRecord, render_prompt
from .cpg import BranchMask, Cpg
from .gnn import GnnConfig, Variant
from .lm import DecodeMode, Generation, LmConfig, PromptEncoding, Vocab
from .numerics import ParameterStore, Tensor


class CheckpointNotFound(FileNotFoundError):
    pass


@dataclass
class Example:
    """One model input: encoded prompt plus the graph pieces it refers to."""
    encoding: PromptEncoding
    cpg: Optional[Cpg]
    mask: Optional[BranchMask]
    record_id: str = ""


class JointModel:
    def __init__(self, gnn_cfg: GnnConfig, lm_cfg: LmConfig, store: ParameterStore,
                 vocab: Optional[Vocab] = None):
        self.gnn_cfg = gnn_cfg
        self.lm_cfg = lm_cfg
        self.store = store
        self.vocab = vocab or Vocab.default()

    @classmethod
    def create(cls, seed: int, gnn_cfg: Optional[GnnConfig] = None,
               lm_cfg: Optional[LmConfig] = None) -> "JointModel":
        gnn_cfg = gnn_cfg or GnnConfig()
        lm_cfg = lm_cfg or LmConfig(d_h=gnn_cfg.d_h, d_model=gnn_cfg.d_h)
        vocab = Vocab.default()
        rng = np.random.default_rng(seed)
        store = ParameterStore()
        lm.init_lm_params(store, lm_cfg, len(vocab), rng)
        gnn_mod.init_gnn_params(store, gnn_cfg, rng)
        return cls(gnn_cfg, lm_cfg, store, vocab)

    @property
    def uses_graph(self) -> bool:
        return self.gnn_cfg.variant is not Variant.NONE

    # -- data --------------------------------------------------------------

    def example(self, record: DatasetRecord, corpus: Corpus, with_target: bool = True) -> Example:
        available = self.uses_graph and record.mask.available
        prompt = record.prompt_text
        if available != ("<|graph_pad|>" in prompt):
            prompt = render_prompt(corpus.programs[record.program_ref], record.branch,
                                   mask_available=available)
        enc = lm.encode_prompt(prompt, record.test.source_text if with_target else None, self.vocab)
        cpg = corpus.cpg(record.program_ref) if available else None
        return Example(enc, cpg, record.mask if available else None, record.record_id)

    # -- forward -----------------------------------------------------------

    def graph_rows(self, ex: Example) -> Optional[Tensor]:
        if not ex.encoding.mask_available:
            return None
        return gnn_mod.gnn_forward(ex.cpg, ex.mask, self.gnn_cfg, self.store)

    def logits(self, batch: Sequence[Example]) -> Tensor:
        rows = [self.graph_rows(ex) for ex in batch]
        x = lm.embed_batch([ex.encoding for ex in batch], rows, self.lm_cfg, self.store, self.vocab)
        return lm.lm_forward(x, self.lm_cfg, self.store)

    def loss(self, batch: Sequence[Example]) -> Tensor:
        return lm.training_loss([ex.encoding for ex in batch], self.logits(batch))

    def generate(self, batch: Sequence[Example], mode: DecodeMode = lm.GREEDY, max_new: int = 64,
                 seed: int = 0) -> list[Generation]:
        with nx.no_grad():
            rows = [self.graph_rows(ex) for ex in batch]
        return lm.decode_batch([ex.encoding for ex in batch], rows, self.lm_cfg, self.store,
                               self.vocab, mode, max_new, seed)

    # -- persistence -------------------------------------------------------

    def metadata(self) -> dict:
        meta = {f"gnn.{k}": getattr(v, "value", v) for k, v in asdict(self.gnn_cfg).items()}
        meta.update({f"lm.{k}": v for k, v in asdict(self.lm_cfg).items()})
        meta["vocab_size"] = len(self.vocab)
        return meta

    def save(self, path, extra: Optional[dict] = None):
        nx.save_checkpoint(self.store, path, {**self.metadata(), **(extra or {})})

    @classmethod
    def load(cls, path) -> tuple["JointModel", dict]:
        try:
            store, meta = nx.load_checkpoint(path)
        except FileNotFoundError:
            raise CheckpointNotFound(str(path)) from None
        gnn_kw = {k[4:]: _coerce(v) for k, v in meta.items() if k.startswith("gnn.")}
        lm_kw = {k[3:]: _coerce(v) for k, v in meta.items() if k.startswith("lm.")}
        model = cls(GnnConfig(**gnn_kw), LmConfig(**lm_kw), store)
        if int(meta.get("vocab_size", len(model.vocab))) != len(model.vocab):
            raise ValueError("checkpoint vocabulary size does not match")
        return model, meta


def _coerce(text: str):
    if text in ("True", "False"):
        return text == "True"
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text
