"""Training objectives: two cloze tasks, next-token generation, and the
entity-interleaved variant, plus their masking plans.

Cloze corruption hits 15% of the maskable positions (round, at least one when
the rate is positive), replacing with [MASK] 80% of the time, a random
ordinary token 10%, and leaving the token 10%.  Generation-side supervision
selects positions in the output segment and scores each on the FOLLOWING
token; fine-tuning raises the selection rate to 1.  The total loss is the
exact sum of the enabled task losses.
"""

from __future__ import annotations

import random
import zlib
from dataclasses import dataclass

import numpy as np

from . import ops
from .documents import Document, serialize_target
from .layout import normalize_box, source_layout, special_layout
from .model import KVGenModel, SourceBatch
from .tensor import Tensor
from .vocab import Vocab

TASKS = ("uni", "bi", "s2s", "ner")
IGNORE = -100


def derive_seed(*parts) -> int:
    return zlib.crc32(":".join(str(p) for p in parts).encode())


@dataclass
class ClozeSample:
    sb: SourceBatch               # source with corrupted token ids
    corruption: dict[int, int]    # position -> original id
    mode: str                     # "unidirectional" | "bidirectional"


@dataclass
class GenSample:
    sb: SourceBatch               # encoded source (A side)
    b_ids: np.ndarray             # [BEG] target tokens ... [SEP]
    loss_positions: np.ndarray    # indices within B predicting their successor
    mode: str                     # "seq2seq" | "ner"


@dataclass
class LossBreakdown:
    uni: Tensor | None = None
    bi: Tensor | None = None
    s2s: Tensor | None = None
    ner: Tensor | None = None
    total: Tensor | None = None

    def scalars(self) -> dict[str, float]:
        out = {}
        for task in TASKS + ("total",):
            t = getattr(self, task)
            out[task] = float(t.item()) if t is not None else 0.0
        return out


def select_corruptions(ids, vocab: Vocab, rate: float, seed: int) -> dict[int, int]:
    """Choose positions and replacement ids; the map holds original ids."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"cloze rate must be in [0, 1], got {rate}")
    rng = random.Random(seed)
    specials = vocab.special_ids
    selectable = [i for i, t in enumerate(ids) if t not in specials]
    n = int(round(rate * len(selectable)))
    if rate > 0.0 and n == 0 and selectable:
        n = 1
    chosen = sorted(rng.sample(selectable, n)) if n else []
    plan: dict[int, int] = {}
    for pos in chosen:
        plan[pos] = ids[pos]
    return plan


def corrupt_ids(ids, plan: dict[int, int], vocab: Vocab, seed: int) -> np.ndarray:
    rng = random.Random(seed)
    out = np.asarray(ids).copy()
    n_reserved = len(vocab.reserved_ids)
    for pos in sorted(plan):
        r = rng.random()
        if r < 0.8:
            out[pos] = vocab.mask_id
        elif r < 0.9:
            out[pos] = rng.randrange(n_reserved, len(vocab))
        # else: keep the original token
    return out


def apply_cloze_masking(sb: SourceBatch, vocab: Vocab, mode: str,
                        rate: float = 0.15, seed: int = 0) -> ClozeSample:
    if mode not in ("unidirectional", "bidirectional"):
        raise ValueError(f"apply_cloze_masking: bad mode {mode!r}")
    plan = select_corruptions(sb.ids, vocab, rate, derive_seed(seed, "select"))
    new_ids = corrupt_ids(sb.ids, plan, vocab, derive_seed(seed, "replace"))
    corrupted = SourceBatch(ids=new_ids, fragment_index=sb.fragment_index,
                            layouts=sb.layouts, use_roi=sb.use_roi,
                            pad_positions=sb.pad_positions, n_tokens=sb.n_tokens,
                            image=sb.image)
    return ClozeSample(sb=corrupted, corruption=plan, mode=mode)


def select_b_positions(b_len: int, rate: float, seed: int) -> np.ndarray:
    """Positions in B that predict their successor; the final token never
    predicts (nothing follows it)."""
    if b_len < 2:
        raise ValueError("target segment is empty")
    selectable = list(range(b_len - 1))
    if rate >= 1.0:
        return np.asarray(selectable)
    n = int(round(rate * len(selectable)))
    if rate > 0.0 and n == 0:
        n = 1
    return np.asarray(sorted(random.Random(seed).sample(selectable, n)))


def build_s2s_sample(doc: Document, pairs, model: KVGenModel, vocab: Vocab,
                     seed: int = 0, b_sample_rate: float = 0.15,
                     target_mode: str = "fixed-key", order: str = "spatial",
                     pad_to: int | None = None) -> GenSample:
    if not pairs:
        raise ValueError("build_s2s_sample: no target pairs")
    sb = model.prepare_source(doc, vocab, order=order, pad_to=pad_to)
    b_ids = np.asarray([vocab.beg_id] + vocab.encode(serialize_target(pairs, target_mode)))
    positions = select_b_positions(len(b_ids), b_sample_rate, derive_seed(seed, "b"))
    return GenSample(sb=sb, b_ids=b_ids, loss_positions=positions, mode="seq2seq")


def build_ner_sample(entities, backgrounds, model: KVGenModel, vocab: Vocab,
                     seed: int = 0) -> GenSample:
    """A interleaves entity values with background spans; B interleaves entity
    types with entity values.  Every entity token in B is a prediction target.

    entities: (type string, value string, quantized box) triples.
    backgrounds: (text, quantized box) pairs.
    """
    if not entities:
        raise ValueError("build_ner_sample: need at least one entity")
    for name, value, _ in entities:
        if not value or not vocab.encode(value):
            raise ValueError(f"build_ner_sample: entity {name!r} has no tokens in A")
    alpha = model.config.max_scale
    ids = [vocab.beg_id]
    layouts = [special_layout(False, alpha, alpha)]
    use_roi = [True]
    frag_index: list[int | None] = [None]
    spans = []
    backgrounds = list(backgrounds)
    for i, (name, value, box) in enumerate(entities):
        piece = vocab.encode(value)
        spans.append((name, piece))
        for k in range(len(piece)):
            layouts.append(source_layout(box, k, len(piece),
                                         model.config.fragment_shared_boxes))
        ids.extend(piece)
        use_roi.extend([True] * len(piece))
        frag_index.extend([i] * len(piece))
        if i < len(backgrounds):
            btext, bbox = backgrounds[i]
            bpiece = vocab.encode(btext)
            for k in range(len(bpiece)):
                layouts.append(source_layout(bbox, k, len(bpiece),
                                             model.config.fragment_shared_boxes))
            ids.extend(bpiece)
            use_roi.extend([True] * len(bpiece))
            frag_index.extend([None] * len(bpiece))
    ids.append(vocab.sep_id)
    layouts.append(special_layout(False, alpha, alpha))
    use_roi.append(False)
    frag_index.append(None)
    sb = SourceBatch(ids=np.asarray(ids), fragment_index=frag_index, layouts=layouts,
                     use_roi=use_roi, pad_positions=np.array([], dtype=np.intp),
                     n_tokens=len(ids))

    b_ids = [vocab.beg_id]
    for name, piece in spans:
        b_ids.extend(vocab.encode(name))
        b_ids.extend(piece)
    b_ids.append(vocab.sep_id)
    b_ids = np.asarray(b_ids)
    # every content token of B is a target; the slot before [SEP] predicts nothing
    positions = np.arange(len(b_ids) - 2)
    return GenSample(sb=sb, b_ids=b_ids, loss_positions=positions, mode="ner")


def ner_sample_from_document(doc: Document, model: KVGenModel, vocab: Vocab,
                             seed: int = 0) -> GenSample:
    """Entities are the gold values located in fragments; other fragments are
    background."""
    alpha = model.config.max_scale
    entities = []
    used = set()
    for pair in doc.gold_pairs:
        found = None
        for fi, frag in enumerate(doc.fragments):
            if pair.value and pair.value in frag.text:
                found = fi
                break
        if found is None:
            raise ValueError(f"ner_sample_from_document: value for {pair.key!r} "
                             "not present in any fragment")
        used.add(found)
        box = normalize_box(doc.fragments[found].box, doc.page_width,
                            doc.page_height, alpha)
        entities.append((pair.key, pair.value, box))
    backgrounds = [(frag.text,
                    normalize_box(frag.box, doc.page_width, doc.page_height, alpha))
                   for fi, frag in enumerate(doc.fragments) if fi not in used]
    return build_ner_sample(entities, backgrounds, model, vocab, seed)


def cloze_loss(model: KVGenModel, sample: ClozeSample,
               dropout_rng=None) -> Tensor:
    positions = np.asarray(sorted(sample.corruption), dtype=np.intp)
    if positions.size == 0:
        return Tensor(np.asarray(0.0, dtype=model.config.np_dtype))
    logits = model.forward_teacher_forced(sample.sb, [], mode=sample.mode,
                                          logit_positions=positions,
                                          dropout_rng=dropout_rng)
    targets = np.asarray([sample.corruption[p] for p in positions])
    return ops.cross_entropy(logits, targets)


def generation_loss(model: KVGenModel, sample: GenSample,
                    dropout_rng=None) -> Tensor:
    logits = model.forward_teacher_forced(sample.sb, sample.b_ids, mode=sample.mode,
                                          dropout_rng=dropout_rng)
    targets = np.full(len(sample.b_ids), IGNORE, dtype=np.int64)
    targets[sample.loss_positions] = sample.b_ids[sample.loss_positions + 1]
    return ops.cross_entropy(logits, targets, ignore_index=IGNORE)


def _mean(losses: list[Tensor]) -> Tensor:
    total = losses[0]
    for t in losses[1:]:
        total = ops.add(total, t)
    return ops.scale(total, 1.0 / len(losses)) if len(losses) > 1 else total


def compute_total_loss(model: KVGenModel, batch: dict[str, list],
                       enabled=TASKS, dropout_rng=None) -> LossBreakdown:
    enabled = tuple(enabled)
    if not enabled:
        raise ValueError("compute_total_loss: no tasks enabled")
    unknown = set(enabled) - set(TASKS)
    if unknown:
        raise ValueError(f"compute_total_loss: unknown tasks {sorted(unknown)}")
    breakdown = LossBreakdown()
    total = None
    for task in TASKS:
        if task not in enabled:
            continue
        samples = batch.get(task, [])
        if not samples:
            continue
        if task in ("uni", "bi"):
            losses = [cloze_loss(model, s, dropout_rng) for s in samples]
        else:
            losses = [generation_loss(model, s, dropout_rng) for s in samples]
        task_loss = _mean(losses)
        setattr(breakdown, task, task_loss)
        total = task_loss if total is None else ops.add(total, task_loss)
    if total is None:
        raise ValueError("compute_total_loss: batch has no samples for enabled tasks")
    breakdown.total = total
    return breakdown
