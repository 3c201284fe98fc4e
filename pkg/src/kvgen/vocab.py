"""Greedy longest-match subword vocabulary with single-character fallback.

Every string over the corpus alphabet tokenizes (characters are always in the
vocabulary) and decode is plain concatenation, so encode/decode round-trips
losslessly.  Multi-character pieces never contain '[', ']' or ':' so the
bracketed control tokens and the key/value separator always map to their
reserved ids.
"""

from __future__ import annotations

import json
from collections import Counter
from pathlib import Path

RESERVED_TOKENS = ("[PAD]", "[BEG]", "[SEP]", "[MASK]", "[DSEP]", ":")
# digits stay single tokens so numbers tokenize uniformly; a space may only
# end a piece, so no piece spans a word boundary
_PIECE_FORBIDDEN = set("[]:0123456789\t\n")
_MAX_PIECE_LEN = 10


def _valid_piece(piece: str) -> bool:
    if _PIECE_FORBIDDEN & set(piece):
        return False
    return " " not in piece[:-1]


class Vocab:
    def __init__(self, tokens: list[str]):
        if list(tokens[: len(RESERVED_TOKENS)]) != list(RESERVED_TOKENS):
            raise ValueError("vocab must start with the reserved tokens "
                             f"{RESERVED_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocab contains duplicate tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self._max_len = max(len(t) for t in self.tokens)

    pad_id, beg_id, sep_id, mask_id, dsep_id, colon_id = range(6)

    @property
    def reserved_ids(self) -> tuple[int, ...]:
        return tuple(range(len(RESERVED_TOKENS)))

    @property
    def special_ids(self) -> frozenset[int]:
        # bracketed control tokens; ':' is ordinary content for masking purposes
        return frozenset((self.pad_id, self.beg_id, self.sep_id, self.mask_id, self.dsep_id))

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        """Greedy longest-match; raises on characters outside the alphabet."""
        ids: list[int] = []
        i = 0
        n = len(text)
        while i < n:
            piece_id = None
            for length in range(min(self._max_len, n - i), 0, -1):
                piece_id = self.index.get(text[i:i + length])
                if piece_id is not None:
                    i += length
                    break
            if piece_id is None:
                raise ValueError(f"cannot tokenize {text[i]!r} at position {i}: "
                                 "character not in vocabulary")
            ids.append(piece_id)
        return ids

    def decode(self, ids) -> str:
        return "".join(self.tokens[i] for i in ids)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.tokens, ensure_ascii=False, indent=0))

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(json.loads(Path(path).read_text()))


def build_vocab(documents, max_size: int = 2000, min_count: int = 2) -> Vocab:
    """Frequency-ranked subword pieces over fragment texts and gold pairs."""
    texts: list[str] = []
    for doc in documents:
        texts.extend(frag.text for frag in doc.fragments)
        for pair in doc.gold_pairs:
            texts.extend((pair.key, pair.value))
    texts = [t for t in texts if t]
    if not texts:
        raise ValueError("build_vocab: empty corpus")

    alphabet = sorted(({ch for t in texts for ch in t} | {" "}) - set(RESERVED_TOKENS))
    floor = len(RESERVED_TOKENS) + len(alphabet)
    if max_size < floor:
        raise ValueError(f"build_vocab: max_size {max_size} below reserved + "
                         f"alphabet size {floor}")

    counts: Counter[str] = Counter()
    for text in texts:
        n = len(text)
        for start in range(n):
            limit = min(_MAX_PIECE_LEN, n - start)
            for length in range(2, limit + 1):
                piece = text[start:start + length]
                if _PIECE_FORBIDDEN & set(piece) or " " in piece[:-2]:
                    break
                if _valid_piece(piece):
                    counts[piece] += 1

    budget = max_size - floor
    ranked = sorted((p for p, c in counts.items() if c >= min_count),
                    key=lambda p: (-counts[p], len(p), p))
    pieces = ranked[:budget]
    return Vocab(list(RESERVED_TOKENS) + alphabet + pieces)
