"""Document model, target-string conventions, augmentations and dataset IO.

A document is an ordered list of OCR fragments (text + page-pixel box) plus
gold key-value pairs.  Targets serialize as ``k : v [DSEP] k : v ... [SEP]``
and the parser is total on arbitrary model output: segments without a colon
are dropped and counted, and only the first colon splits key from value.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, replace
from pathlib import Path

from .vocab import Vocab

RECEIPT_KEY_ORDER = ("company", "date", "address", "total")

# visually-confusable substitutions applied by the OCR-noise model
CONFUSION_PAIRS = {"0": "O", "O": "0", "1": "l", "l": "1",
                   "5": "S", "S": "5", "8": "B", "B": "8"}


@dataclass(frozen=True)
class Fragment:
    text: str
    box: tuple[int, int, int, int]  # (x0, y0, x1, y1) in page pixels


@dataclass(frozen=True)
class KVPair:
    key: str
    value: str


@dataclass
class Document:
    id: str
    page_width: int
    page_height: int
    fragments: list[Fragment]
    gold_pairs: list[KVPair]
    image: str | None = None  # path to an external raster, or None to render


@dataclass
class EncodedSource:
    ids: list[int]
    fragment_index: list[int | None]  # None at special-token positions
    n_tokens: int  # positions before padding (includes [BEG] and [SEP])
    dropped_fragments: int = 0


class DatasetError(ValueError):
    """Dataset file violates the JSON schema; message carries the location."""


def spatial_order(fragments) -> list[int]:
    """Reading order used for encoding: top to bottom, then left to right."""
    return sorted(range(len(fragments)), key=lambda i: (fragments[i].box[1], fragments[i].box[0]))


def encode_source(doc: Document, vocab: Vocab, max_len: int | None,
                  order: str = "spatial") -> EncodedSource:
    """[BEG] frag tokens with [DSEP] between fragments, [SEP], then [PAD]s.

    Truncation drops whole fragments from the end of the chosen order so
    token/box alignment is never split mid-fragment.
    """
    if max_len is not None and max_len < 2:
        raise ValueError(f"encode_source: max_len must be >= 2, got {max_len}")
    if order == "spatial":
        frag_order = spatial_order(doc.fragments)
    elif order == "given":
        frag_order = list(range(len(doc.fragments)))
    else:
        raise ValueError(f"encode_source: unknown order {order!r}")

    ids = [vocab.beg_id]
    frag_idx: list[int | None] = [None]
    dropped = 0
    for pos, fi in enumerate(frag_order):
        piece_ids = vocab.encode(doc.fragments[fi].text)
        extra = len(piece_ids) + (1 if pos > 0 else 0)
        if max_len is not None and len(ids) + extra + 1 > max_len:
            if pos == 0:
                raise ValueError(
                    f"encode_source: first fragment alone exceeds max_len={max_len}")
            dropped = len(frag_order) - pos
            break
        if pos > 0:
            ids.append(vocab.dsep_id)
            frag_idx.append(None)
        ids.extend(piece_ids)
        frag_idx.extend([fi] * len(piece_ids))
    ids.append(vocab.sep_id)
    frag_idx.append(None)
    n_tokens = len(ids)
    if max_len is not None:
        pad = max_len - len(ids)
        ids.extend([vocab.pad_id] * pad)
        frag_idx.extend([None] * pad)
    return EncodedSource(ids=ids, fragment_index=frag_idx,
                         n_tokens=n_tokens, dropped_fragments=dropped)


def serialize_target(pairs, dataset_mode: str = "spatial",
                     key_order=RECEIPT_KEY_ORDER) -> str:
    """``k1 : v1 [DSEP] k2 : v2 ... [SEP]``; fixed-key mode follows key_order."""
    pairs = list(pairs)
    if dataset_mode == "fixed-key":
        seen: dict[str, str] = {}
        for p in pairs:
            if p.key in seen:
                raise ValueError(f"serialize_target: duplicate key {p.key!r} in fixed-key mode")
            seen[p.key] = p.value
        ordered = [KVPair(k, seen[k]) for k in key_order if k in seen]
    elif dataset_mode == "spatial":
        ordered = pairs
    else:
        raise ValueError(f"serialize_target: unknown mode {dataset_mode!r}")
    body = " [DSEP] ".join(f"{p.key} : {p.value}" for p in ordered)
    return f"{body} [SEP]" if body else "[SEP]"


def parse_generated(text: str) -> tuple[list[KVPair], int]:
    """Total inverse of serialize_target; returns (pairs, malformed segments)."""
    text = text.split("[SEP]", 1)[0]
    pairs: list[KVPair] = []
    malformed = 0
    for segment in text.split("[DSEP]"):
        if not segment.strip():
            continue
        if ":" not in segment:
            malformed += 1
            continue
        key, value = segment.split(":", 1)
        pairs.append(KVPair(key.strip(), value.strip()))
    return pairs, malformed


def shuffle_fragments(doc: Document, seed: int) -> Document:
    """Permute fragment order only; texts, boxes and gold pairs are untouched."""
    order = list(range(len(doc.fragments)))
    random.Random(seed).shuffle(order)
    return replace(doc, fragments=[doc.fragments[i] for i in order])


def _noise_chars(text: str, rate: float, rng: random.Random) -> tuple[str, list[int]]:
    """Substitute confusable characters; returns (noisy text, output offset per
    input position, with one trailing sentinel for end-of-string)."""
    out: list[str] = []
    offsets: list[int] = []
    pos = 0
    i = 0
    while i < len(text):
        hit = rng.random() < rate
        if hit and text.startswith("rn", i):
            offsets.extend((pos, pos))
            out.append("m")
            pos += 1
            i += 2
            continue
        offsets.append(pos)
        ch = text[i]
        if hit and ch == "m":
            out.append("rn")
            pos += 2
        elif hit and ch in CONFUSION_PAIRS:
            out.append(CONFUSION_PAIRS[ch])
            pos += 1
        else:
            out.append(ch)
            pos += 1
        i += 1
    offsets.append(pos)
    return "".join(out), offsets


def _fragment_rng(seed: int, doc_id: str, frag_index: int) -> random.Random:
    return random.Random(f"{seed}:{doc_id}:{frag_index}")


def inject_ocr_noise(doc: Document, char_sub_rate: float, seed: int) -> Document:
    """Corrupt fragment texts with confusable characters; gold stays clean."""
    if not 0.0 <= char_sub_rate <= 1.0:
        raise ValueError(f"inject_ocr_noise: rate must be in [0, 1], got {char_sub_rate}")
    if char_sub_rate == 0.0:
        return doc
    noisy = []
    for fi, frag in enumerate(doc.fragments):
        text, _ = _noise_chars(frag.text, char_sub_rate, _fragment_rng(seed, doc.id, fi))
        noisy.append(Fragment(text=text, box=frag.box))
    return replace(doc, fragments=noisy)


def noisy_span(doc: Document, frag_index: int, start: int, end: int,
               char_sub_rate: float, seed: int) -> str:
    """The text a clean-fragment span [start, end) becomes after inject_ocr_noise."""
    frag = doc.fragments[frag_index]
    text, offsets = _noise_chars(frag.text, char_sub_rate, _fragment_rng(seed, doc.id, frag_index))
    return text[offsets[start]:offsets[end]]


def _expect(cond: bool, where: str, message: str) -> None:
    if not cond:
        raise DatasetError(f"{where}: {message}")


def _parse_document(obj, where: str) -> Document:
    _expect(isinstance(obj, dict), where, "document must be an object")
    for key in ("id", "page_width", "page_height", "fragments", "gold_pairs"):
        _expect(key in obj, where, f"missing {key!r}")
    _expect(isinstance(obj["id"], str), f"{where}/id", "must be a string")
    for key in ("page_width", "page_height"):
        _expect(isinstance(obj[key], int) and obj[key] > 0, f"{where}/{key}",
                "must be a positive integer")
    w, h = obj["page_width"], obj["page_height"]
    fragments = []
    for i, f in enumerate(obj["fragments"]):
        floc = f"{where}/fragments/{i}"
        _expect(isinstance(f, dict), floc, "fragment must be an object")
        _expect("text" in f, floc, "missing 'text'")
        _expect("box" in f, floc, "missing 'box'")
        _expect(isinstance(f["text"], str), f"{floc}/text", "must be a string")
        box = f["box"]
        _expect(isinstance(box, list) and len(box) == 4
                and all(isinstance(v, int) for v in box), f"{floc}/box",
                "must be four integers [x0, y0, x1, y1]")
        x0, y0, x1, y1 = box
        _expect(x0 <= x1 and y0 <= y1, f"{floc}/box",
                f"invalid extent: ({x0}, {y0}, {x1}, {y1})")
        _expect(0 <= x0 and x1 <= w and 0 <= y0 and y1 <= h, f"{floc}/box",
                f"outside page {w}x{h}")
        fragments.append(Fragment(text=f["text"], box=(x0, y0, x1, y1)))
    pairs = []
    for i, p in enumerate(obj["gold_pairs"]):
        ploc = f"{where}/gold_pairs/{i}"
        _expect(isinstance(p, dict) and "key" in p and "value" in p, ploc,
                "must be an object with 'key' and 'value'")
        _expect(isinstance(p["key"], str) and isinstance(p["value"], str), ploc,
                "key and value must be strings")
        pairs.append(KVPair(key=p["key"], value=p["value"]))
    image = obj.get("image")
    _expect(image is None or isinstance(image, str), f"{where}/image",
            "must be a path string or null")
    return Document(id=obj["id"], page_width=w, page_height=h,
                    fragments=fragments, gold_pairs=pairs, image=image)


def load_dataset(path) -> list[Document]:
    data = json.loads(Path(path).read_text())
    _expect(isinstance(data, dict) and "documents" in data, "/", "missing 'documents'")
    docs = data["documents"]
    _expect(isinstance(docs, list), "/documents", "must be a list")
    return [_parse_document(d, f"/documents/{i}") for i, d in enumerate(docs)]


def save_dataset(docs, path) -> None:
    payload = {"documents": [{
        "id": d.id,
        "page_width": d.page_width,
        "page_height": d.page_height,
        "image": d.image,
        "fragments": [{"text": f.text, "box": list(f.box)} for f in d.fragments],
        "gold_pairs": [{"key": p.key, "value": p.value} for p in d.gold_pairs],
    } for d in docs]}
    Path(path).write_text(json.dumps(payload, ensure_ascii=False, indent=1))
