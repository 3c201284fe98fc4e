"""Synthetic receipt/form corpus with box annotations, plus the copy baseline.

Receipts carry the fixed keys (company, date, address, total); forms carry
randomized key:value grids with optional test-only unseen keys.  Every gold
value appears verbatim in some fragment before noise, fragments never overlap,
and generation is bitwise deterministic in the seed.  Numeric values are
biased toward characters the OCR-noise model can corrupt so denoising
experiments have something to correct.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
import random

import numpy as np

from .documents import Document, Fragment, KVPair, inject_ocr_noise, noisy_span, spatial_order

# field pools: a receipt chain has recurring companies, branches and amounts,
# so held-out documents recombine values the model has seen in context.
# uppercase words avoid O/S/B so label text survives the confusion table;
# numeric fields lean on 0/1/5/8 so the noise model has targets.
COMPANY_POOL = ("AMBER WHALE MART", "DELTA CRANE CAFE", "HAZEL TIGER HALL",
                "LUNAR MAPLE YARD", "PEARL EAGLE MART", "CEDAR FLAME CAFE",
                "RAVEN GRAPE HALL", "AZURE ZEBRA YARD", "TIGER PEARL CAFE",
                "EAGLE CEDAR MART", "GRAPE LUNAR HALL", "WHALE AMBER YARD")
# numeric pool entries have pairwise-distinct digit multisets
DATE_POOL = ("15/08/2011", "28/01/1985", "10/11/2005", "05/12/1998",
             "21/03/2018", "30/06/1987", "18/10/2021", "01/02/1955",
             "25/08/2008", "11/04/2010", "22/07/2016", "08/09/1975")
ADDRESS_POOL = ("58 CEDAR LANE DARWIN", "81 MAPLE AVENUE NARVIK",
                "10 GARDEN WAY HALDEN", "25 WALNUT DRIVE RIVERTA",
                "88 JADE PLAZA TARQUIN", "15 RIVER LANE MIDVALE",
                "40 PARK AVENUE VALEWICK", "92 HILL WAY ELDERWYN",
                "33 CEDAR DRIVE MIDVALE", "05 MAPLE PLAZA DARWIN",
                "76 GARDEN LANE HALDEN", "64 WALNUT WAY RIVERTA")
AMOUNT_POOL = ("158.50", "203.97", "861.40", "409.62", "753.30", "912.08",
               "644.21", "530.76", "288.95", "111.40", "367.89", "505.28")
ITEM_WORDS = ("COFFEE", "TEA", "RICE", "WATER", "JUICE", "PAPER", "CANDLE",
              "PENCIL", "FLOUR", "HONEY", "PASTA", "CEREAL")
FOOTER_LINES = ("THANK YOU", "WELCOME AGAIN", "HAVE A NICE DAY", "PLEASE COME AGAIN")

FORM_KEYS_TRAIN = ("owner", "agent", "phone", "branch", "region", "grade",
                   "dept", "unit", "batch", "code", "rate", "term", "type",
                   "area", "city", "lead", "plan", "ref", "zone", "tier")
FORM_KEYS_UNSEEN = ("clerk", "crew", "dock", "fleet", "gate", "guild", "index",
                    "lot", "node", "order", "panel", "phase", "pier", "queue",
                    "range", "ring", "seat", "shift", "track", "wing")
FORM_VALUE_WORDS = ("NORTH", "EAST", "WEST", "CENTRAL", "PRIME", "ALPHA",
                    "DELTA", "ECHO", "KILO", "ZULU", "RED", "GREEN", "TEAL",
                    "AMBER", "IVORY", "PEARL")

_CONFUSABLE_DIGITS = "0158"
_OTHER_DIGITS = "234679"

CHAR_W = 11
LINE_H = 26


@dataclass(frozen=True)
class NoiseSpec:
    char_sub_rate: float = 0.0
    seed: int = 0


def _digit(rng: random.Random) -> str:
    pool = _CONFUSABLE_DIGITS if rng.random() < 0.7 else _OTHER_DIGITS
    return rng.choice(pool)


def _digits(rng: random.Random, n: int) -> str:
    return "".join(_digit(rng) for _ in range(n))


class _FieldSampler:
    """Stratified draws: a shuffled pass over the pool before random reuse,
    so a 12-entry pool is fully covered by the first 12 documents."""

    def __init__(self, pool, rng: random.Random):
        self.pool = pool
        self.rng = rng
        self.cycle = list(pool)
        rng.shuffle(self.cycle)
        self.i = 0

    def draw(self) -> str:
        if self.i < len(self.cycle):
            value = self.cycle[self.i]
            self.i += 1
            return value
        return self.rng.choice(self.pool)


def _receipt(rng: random.Random, doc_id: str, fields: dict[str, str]) -> Document:
    # one print template: fixed left margin and line pitch, so the same field
    # lands on the same quantized row across documents
    page_w, page_h = 600, 1000
    lines = [f"company : {fields['company']}", f"date : {fields['date']}",
             f"address : {fields['address']}"]
    for _ in range(rng.randint(1, 3)):
        lines.append(f"{rng.randint(1, 4)} x {rng.choice(ITEM_WORDS)} "
                     f"{_digits(rng, 3)}.{_digits(rng, 2)}")
    lines.append(f"total : {fields['total']}")
    lines.append(rng.choice(FOOTER_LINES))

    fragments = []
    for i, text in enumerate(lines):
        x0 = 36
        y = 40 + i * 60
        x1 = min(x0 + CHAR_W * len(text), page_w)
        fragments.append(Fragment(text=text, box=(x0, y, x1, y + LINE_H)))
    gold = [KVPair("company", fields["company"]), KVPair("date", fields["date"]),
            KVPair("address", fields["address"]), KVPair("total", fields["total"])]
    if 40 + len(lines) * 60 > page_h:
        raise ValueError(f"receipt layout for {doc_id} exceeds page height")
    return Document(id=doc_id, page_width=page_w, page_height=page_h,
                    fragments=fragments, gold_pairs=gold)


def _form_value(rng: random.Random) -> str:
    if rng.random() < 0.5:
        return " ".join(rng.sample(FORM_VALUE_WORDS, rng.randint(1, 2)))
    return _digits(rng, rng.randint(2, 4))


def _form(rng: random.Random, doc_id: str, key_pool: tuple[str, ...],
          unseen_pool: tuple[str, ...] = (), unseen_key_fraction: float = 0.0) -> Document:
    page_w, page_h = 800, 1000
    n_cols = rng.randint(2, 3)
    n_rows = rng.randint(3, 5)
    n_cells = n_cols * n_rows
    n_unseen = int(round(unseen_key_fraction * n_cells)) if unseen_pool else 0
    n_unseen = min(n_unseen, len(unseen_pool), n_cells)
    keys = rng.sample(unseen_pool, n_unseen) + rng.sample(key_pool, n_cells - n_unseen)
    rng.shuffle(keys)

    col_w = page_w // n_cols
    fragments, entries = [], []
    for r in range(n_rows):
        for c in range(n_cols):
            key = keys[r * n_cols + c]
            value = _form_value(rng)
            text = f"{key} : {value}"
            x0 = c * col_w + 20 + rng.randint(0, 10)
            y0 = 60 + r * 90 + rng.randint(0, 20)
            x1 = min(x0 + CHAR_W * len(text), (c + 1) * col_w - 4)
            fragments.append(Fragment(text=text, box=(x0, y0, x1, y0 + LINE_H)))
            entries.append((key, value))
    if 60 + n_rows * 90 > page_h:
        raise ValueError(f"form layout for {doc_id} exceeds page height")
    order = spatial_order(fragments)
    gold = [KVPair(*entries[i]) for i in order]
    return Document(id=doc_id, page_width=page_w, page_height=page_h,
                    fragments=fragments, gold_pairs=gold)


def gen_synthetic_corpus(seed: int, n_docs: int, template: str = "receipt",
                         noise: NoiseSpec | None = None,
                         unseen_key_fraction: float = 0.0,
                         id_prefix: str = "doc") -> list[Document]:
    if n_docs < 1:
        raise ValueError(f"gen_synthetic_corpus: n_docs must be >= 1, got {n_docs}")
    rng = random.Random(seed)
    samplers = {"company": _FieldSampler(COMPANY_POOL, rng),
                "date": _FieldSampler(DATE_POOL, rng),
                "address": _FieldSampler(ADDRESS_POOL, rng),
                "total": _FieldSampler(AMOUNT_POOL, rng)}
    docs = []
    for i in range(n_docs):
        doc_id = f"{id_prefix}-{template}-{i:04d}"
        if template == "receipt":
            doc = _receipt(rng, doc_id, {k: s.draw() for k, s in samplers.items()})
        elif template == "form":
            doc = _form(rng, doc_id, FORM_KEYS_TRAIN, FORM_KEYS_UNSEEN, unseen_key_fraction)
        else:
            raise ValueError(f"gen_synthetic_corpus: unknown template {template!r}")
        if noise is not None and noise.char_sub_rate > 0:
            doc = inject_ocr_noise(doc, noise.char_sub_rate, noise.seed)
        docs.append(doc)
    return docs


def copy_baseline_predictions(clean_docs, char_sub_rate: float, seed: int) -> list[list[KVPair]]:
    """Perfect localization, no correction: each gold value's span read verbatim
    from the noisy text.  The reference point OCR-error-correction must beat."""
    preds = []
    for doc in clean_docs:
        pairs = []
        for gold in doc.gold_pairs:
            for fi, frag in enumerate(doc.fragments):
                start = frag.text.find(gold.value)
                if start >= 0:
                    value = noisy_span(doc, fi, start, start + len(gold.value),
                                       char_sub_rate, seed)
                    pairs.append(KVPair(gold.key, value))
                    break
        preds.append(pairs)
    return preds


def render_document(doc: Document, side: int) -> np.ndarray:
    """Deterministic grayscale raster: white page, per-character ink texture."""
    img = np.ones((side, side), dtype=np.float64)
    sx = side / doc.page_width
    sy = side / doc.page_height
    for frag in doc.fragments:
        x0, y0, x1, y1 = frag.box
        r0, r1 = int(y0 * sy), max(int(y1 * sy), int(y0 * sy) + 1)
        c0, c1 = int(x0 * sx), max(int(x1 * sx), int(x0 * sx) + 1)
        width = c1 - c0
        n = max(len(frag.text), 1)
        for k, ch in enumerate(frag.text):
            a = c0 + (k * width) // n
            b = max(c0 + ((k + 1) * width) // n, a + 1)
            shade = 0.15 + 0.7 * ((zlib.crc32(ch.encode()) % 97) / 96.0)
            img[r0:r1, a:b] = shade
    return img
