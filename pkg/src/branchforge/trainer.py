"""Joint end-to-end training of the graph encoder and the language model."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .corpus import Corpus, DatasetRecord
from .gnn import GnnConfig, Variant
from .lm import LmConfig
from .model import Example, JointModel

log = logging.getLogger(__name__)


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 3e-4
    weight_decay: float = 1e-4
    seed: int = 0
    val_every: int = 100
    gnn_config: GnnConfig = field(default_factory=GnnConfig)
    lm_config: Optional[LmConfig] = None
    val_limit: Optional[int] = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainReport:
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[tuple[int, float]] = field(default_factory=list)
    checkpoint_path: Optional[str] = None
    best_checkpoint_path: Optional[str] = None
    best_step: int = 0
    wall_time: float = 0.0

    def to_text(self) -> str:
        lines = [f"best_step {self.best_step}", f"checkpoint {self.checkpoint_path}",
                 f"best_checkpoint {self.best_checkpoint_path}", f"wall_time {self.wall_time:.1f}"]
        lines += [f"train {i + 1} {v!r}" for i, v in enumerate(self.train_losses)]
        lines += [f"val {s} {v!r}" for s, v in self.val_losses]
        return "\n".join(lines) + "\n"


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index batches drawn from per-epoch shuffles."""
    order: list[int] = []
    while True:
        batch = []
        while len(batch) < batch_size:
            if not order:
                order = list(rng.permutation(n))
            batch.append(int(order.pop()))
        yield batch


def _eval_loss(model: JointModel, examples: Sequence[Example], batch_size: int) -> float:
    total, weight = 0.0, 0
    with nx.no_grad():
        for i in range(0, len(examples), batch_size):
            chunk = examples[i:i + batch_size]
            n = sum(e.encoding.target_span[1] - e.encoding.target_span[0] for e in chunk)
            total += model.loss(chunk).item() * n
            weight += n
    return total / weight


def _diagnose(model: JointModel, batch: Sequence[Example]) -> str:
    with nx.no_grad():
        for ex in batch:
            if not math.isfinite(model.loss([ex]).item()):
                return ex.record_id
    return batch[0].record_id if batch else "?"


def train(corpus: Corpus, config: TrainConfig, out_dir=None,
          records: Optional[Sequence[DatasetRecord]] = None,
          val_records: Optional[Sequence[DatasetRecord]] = None) -> tuple[TrainReport, JointModel]:
    """Minimize masked cross-entropy over the training records.

    Returns the report and the model holding the best-validation parameters
    (the final parameters when no validation records exist).
    """
    t0 = time.time()
    records = list(records if records is not None else corpus.split("train"))
    if not records:
        raise ValueError("empty training set")
    val_records = list(val_records if val_records is not None else corpus.split("val"))
    if config.val_limit is not None:
        val_records = val_records[:config.val_limit]

    model = JointModel.create(config.seed, config.gnn_config, config.lm_config)
    examples = [model.example(r, corpus) for r in records]
    val_examples = [model.example(r, corpus) for r in val_records]
    rng = np.random.default_rng([config.seed, 1])
    report = TrainReport()
    best = (math.inf, 0, None)
    stream = _batches(len(examples), config.batch_size, rng)

    for step in range(1, config.steps + 1):
        batch = [examples[i] for i in next(stream)]
        loss = model.loss(batch)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLoss(f"loss {value} at step {step}, record {_diagnose(model, batch)}")
        loss.backward()
        nx.adam_step(model.store, config.lr, weight_decay=config.weight_decay)
        report.train_losses.append(value)
        if val_examples and (step % config.val_every == 0 or step == config.steps):
            v = _eval_loss(model, val_examples, max(config.batch_size, 16))
            report.val_losses.append((step, v))
            log.info("step %d train %.4f val %.4f", step, value, v)
            if v < best[0]:
                best = (v, step, {k: t.data.copy() for k, t in model.store.params.items()})
                if out_dir is not None:
                    path = Path(out_dir) / "best.ckpt"
                    model.save(path, {"step": step, "seed": config.seed})
                    report.best_checkpoint_path = str(path)

    if out_dir is not None:
        path = Path(out_dir) / "final.ckpt"
        model.save(path, {"step": config.steps, "seed": config.seed})
        report.checkpoint_path = str(path)
    if best[2] is not None:
        for k, data in best[2].items():
            model.store.params[k].data = data
        report.best_step = best[1]
    else:
        report.best_step = config.steps
    report.wall_time = time.time() - t0
    if out_dir is not None:
        nx.atomic_write(Path(out_dir) / "train_report.txt", report.to_text())
    return report, model


def train_ft_baseline(corpus: Corpus, config: TrainConfig, out_dir=None,
                      records: Optional[Sequence[DatasetRecord]] = None,
                      val_records: Optional[Sequence[DatasetRecord]] = None) -> tuple[TrainReport, JointModel]:
    """Same pipeline with every record on the unavailable-mask path and no graph encoder."""
    ft = replace(config, gnn_config=replace(config.gnn_config, variant=Variant.NONE))
    return train(corpus, ft, out_dir, records, val_records)
