"""Seeded training loops over the task mix, with resumable checkpoints.

Batches are gradient-accumulated document by document (sequences are ragged),
one optimizer step per batch, linear-decay schedule over the whole run.  All
randomness derives from (seed, epoch, index) so a resumed run continues the
uninterrupted trajectory bitwise.  Logs are newline-delimited JSON.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

import numpy as np

from .documents import Document, parse_generated
from .model import KVGenModel
from .objectives import (GenSample, TASKS, apply_cloze_masking, build_s2s_sample,
                         compute_total_loss, derive_seed, ner_sample_from_document)
from .optim import AdamState, adam_step, init_adam, linear_decay
from .tensor import backward
from .vocab import Vocab


@dataclass
class TrainConfig:
    lr: float = 5e-5
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    tasks: tuple[str, ...] = ("s2s",)
    b_sample_rate: float = 1.0   # 1.0 = full next-token supervision on B
    cloze_rate: float = 0.15
    warmup_frac: float = 0.01
    target_mode: str = "fixed-key"
    order: str = "spatial"
    schedule: str = "linear"  # or "constant"
    eval_every_epochs: int = 0
    checkpoint_every_epochs: int = 1

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        unknown = set(self.tasks) - set(TASKS)
        if unknown:
            raise ValueError(f"TrainConfig: unknown tasks {sorted(unknown)}")
        if not self.tasks:
            raise ValueError("TrainConfig: no tasks enabled")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"TrainConfig: unknown keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    adam: AdamState
    epochs_done: int = 0
    history: list[dict] = field(default_factory=list)


def build_batch(model: KVGenModel, vocab: Vocab, docs: list[Document],
                indices, cfg: TrainConfig, epoch: int) -> dict[str, list]:
    batch: dict[str, list] = {t: [] for t in cfg.tasks}
    for i in indices:
        doc = docs[i]
        seed = derive_seed(cfg.seed, "sample", epoch, i)
        if "uni" in cfg.tasks or "bi" in cfg.tasks:
            sb = model.prepare_source(doc, vocab, order=cfg.order)
            if "uni" in cfg.tasks:
                batch["uni"].append(apply_cloze_masking(sb, vocab, "unidirectional",
                                                        cfg.cloze_rate, seed))
            if "bi" in cfg.tasks:
                batch["bi"].append(apply_cloze_masking(sb, vocab, "bidirectional",
                                                       cfg.cloze_rate,
                                                       derive_seed(seed, "bi")))
        if "s2s" in cfg.tasks:
            batch["s2s"].append(build_s2s_sample(
                doc, doc.gold_pairs, model, vocab, seed=seed,
                b_sample_rate=cfg.b_sample_rate, target_mode=cfg.target_mode,
                order=cfg.order))
        if "ner" in cfg.tasks:
            batch["ner"].append(ner_sample_from_document(doc, model, vocab, seed))
    return batch


def predict_documents(model: KVGenModel, vocab: Vocab, docs: list[Document],
                      order: str = "spatial") -> tuple[list[list], int]:
    """Greedy generation + parsing for each document."""
    preds, malformed = [], 0
    for doc in docs:
        sb = model.prepare_source(doc, vocab, order=order)
        tokens = model.generate(sb, vocab)
        pairs, bad = parse_generated(vocab.decode(tokens))
        preds.append(pairs)
        malformed += bad
    return preds, malformed


def train(model: KVGenModel, vocab: Vocab, train_docs: list[Document],
          cfg: TrainConfig, val_docs: list[Document] | None = None,
          log_path=None, checkpoint_path=None,
          state: TrainState | None = None,
          stop_after: int | None = None) -> TrainState:
    """Run (or continue) the configured training plan.

    stop_after simulates an interruption: the schedule still spans cfg.epochs,
    but the loop checkpoints and returns once that many epochs are done.
    """
    if state is None:
        state = TrainState(adam=init_adam(model.params, learning_rate=cfg.lr))
    n = len(train_docs)
    if n == 0:
        raise ValueError("train: empty training set")
    batches_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * batches_per_epoch
    last_epoch = cfg.epochs if stop_after is None else min(stop_after, cfg.epochs)
    log_file = open(log_path, "a") if log_path else None
    try:
        for epoch in range(state.epochs_done, last_epoch):
            order_rng = np.random.default_rng(derive_seed(cfg.seed, "order", epoch))
            doc_order = order_rng.permutation(n)
            epoch_losses = []
            for b in range(batches_per_epoch):
                t0 = time.monotonic()
                indices = doc_order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                batch = build_batch(model, vocab, train_docs, indices, cfg, epoch)
                dropout_rng = None
                if model.config.dropout > 0:
                    dropout_rng = np.random.default_rng(
                        derive_seed(cfg.seed, "dropout", epoch, b))
                breakdown = compute_total_loss(model, batch, cfg.tasks, dropout_rng)
                model.zero_grads()
                backward(breakdown.total)
                if cfg.schedule == "constant":
                    lr_scale = 1.0
                else:
                    lr_scale = linear_decay(state.adam.step_count + 1, total_steps,
                                            cfg.warmup_frac)
                adam_step(model.params, model.grads(), state.adam, lr_scale)
                scalars = breakdown.scalars()
                epoch_losses.append(scalars["total"])
                if log_file:
                    record = {"step": state.adam.step_count, "epoch": epoch,
                              **scalars, "lr": cfg.lr * lr_scale,
                              "wall_ms": round(1000 * (time.monotonic() - t0), 3)}
                    log_file.write(json.dumps(record) + "\n")
                    log_file.flush()
            entry = {"epoch": epoch, "mean_loss": float(np.mean(epoch_losses)),
                     "median_loss": float(np.median(epoch_losses))}
            if val_docs and cfg.eval_every_epochs and \
                    (epoch + 1) % cfg.eval_every_epochs == 0:
                from .evaluation import entity_f1
                preds, bad = predict_documents(model, vocab, val_docs, cfg.order)
                report = entity_f1(preds, [d.gold_pairs for d in val_docs],
                                   malformed_segments=bad)
                entry["val_f1"] = report.f1
            state.history.append(entry)
            state.epochs_done = epoch + 1
            if checkpoint_path and cfg.checkpoint_every_epochs and \
                    (epoch + 1) % cfg.checkpoint_every_epochs == 0:
                save_checkpoint(checkpoint_path, model, state)
        if checkpoint_path:
            save_checkpoint(checkpoint_path, model, state)
    finally:
        if log_file:
            log_file.close()
    return state


def finetune_epoch(model: KVGenModel, vocab: Vocab, docs: list[Document],
                   cfg: TrainConfig, state: TrainState | None = None) -> dict:
    """One generation-objective epoch; returns the epoch metrics entry."""
    one = TrainConfig(**{**cfg.to_dict(), "epochs": state.epochs_done + 1 if state
                         else 1, "tasks": ("s2s",)})
    state = train(model, vocab, docs, one, state=state)
    return state.history[-1]


def save_checkpoint(path, model: KVGenModel, state: TrainState) -> None:
    arrays = {f"param.{k}": t.data for k, t in model.params.items()}
    arrays.update({f"adam.m.{k}": v for k, v in state.adam.first_moment.items()})
    arrays.update({f"adam.v.{k}": v for k, v in state.adam.second_moment.items()})
    meta = {"config": model.config.to_dict(),
            "epochs_done": state.epochs_done,
            "step_count": state.adam.step_count,
            "learning_rate": state.adam.learning_rate,
            "beta1": state.adam.beta1, "beta2": state.adam.beta2,
            "epsilon": state.adam.epsilon,
            "history": state.history}
    np.savez(path, __meta__=json.dumps(meta), **arrays)


def load_checkpoint(path) -> tuple[KVGenModel, TrainState]:
    from .model import ModelConfig
    from .tensor import Tensor
    data = np.load(path, allow_pickle=False)
    meta = json.loads(str(data["__meta__"]))
    params = {k[len("param."):]: Tensor(data[k].copy(), requires_grad=True)
              for k in data.files if k.startswith("param.")}
    model = KVGenModel(ModelConfig.from_dict(meta["config"]), params)
    adam = AdamState(
        first_moment={k[len("adam.m."):]: data[k].copy()
                      for k in data.files if k.startswith("adam.m.")},
        second_moment={k[len("adam.v."):]: data[k].copy()
                       for k in data.files if k.startswith("adam.v.")},
        step_count=meta["step_count"], learning_rate=meta["learning_rate"],
        beta1=meta["beta1"], beta2=meta["beta2"], epsilon=meta["epsilon"])
    state = TrainState(adam=adam, epochs_done=meta["epochs_done"],
                       history=meta["history"])
    return model, state
