"""Entity-level exact-match scoring.

A predicted pair matches an unmatched gold pair of the same document when key
and value are string-equal after the configured normalization (whitespace
collapse on by default, case folding off).  Pairs equal under normalization
form complete bipartite blocks, so the maximum matching is the per-pair
multiset intersection; greedy matching by value realizes it exactly, duplicate
keys included.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

_WS = re.compile(r"\s+")


@dataclass
class KeyStats:
    predicted: int = 0
    gold: int = 0
    matched: int = 0

    def rates(self) -> tuple[float, float, float]:
        p = self.matched / self.predicted if self.predicted else 0.0
        r = self.matched / self.gold if self.gold else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        return p, r, f


@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    predicted: int
    gold: int
    matched: int
    malformed_segments: int = 0
    per_key: dict[str, KeyStats] = field(default_factory=dict)


def normalize(s: str, collapse_ws: bool = True, case_fold: bool = False) -> str:
    if collapse_ws:
        s = _WS.sub(" ", s).strip()
    if case_fold:
        s = s.casefold()
    return s


def entity_f1(pred_docs, gold_docs, collapse_ws: bool = True,
              case_fold: bool = False, malformed_segments: int = 0) -> EvalReport:
    """Micro-averaged exact-match P/R/F1 over parallel document lists."""
    if len(pred_docs) != len(gold_docs):
        raise ValueError(f"entity_f1: {len(pred_docs)} predicted documents vs "
                         f"{len(gold_docs)} gold")
    per_key: dict[str, KeyStats] = {}
    n_pred = n_gold = n_match = 0

    def norm_pair(p):
        return (normalize(p.key, collapse_ws, case_fold),
                normalize(p.value, collapse_ws, case_fold))

    for pred, gold in zip(pred_docs, gold_docs):
        pc = Counter(norm_pair(p) for p in pred)
        gc = Counter(norm_pair(g) for g in gold)
        n_pred += len(pred)
        n_gold += len(gold)
        for (k, _), c in pc.items():
            per_key.setdefault(k, KeyStats()).predicted += c
        for (k, _), c in gc.items():
            per_key.setdefault(k, KeyStats()).gold += c
        for pair, c in (pc & gc).items():
            n_match += c
            per_key[pair[0]].matched += c

    precision = n_match / n_pred if n_pred else 0.0
    recall = n_match / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return EvalReport(precision=precision, recall=recall, f1=f1,
                      predicted=n_pred, gold=n_gold, matched=n_match,
                      malformed_segments=malformed_segments, per_key=per_key)


def format_table(report: EvalReport) -> str:
    rows = [("key", "pred", "gold", "match", "precision", "recall", "f1")]
    for key in sorted(report.per_key):
        s = report.per_key[key]
        p, r, f = s.rates()
        rows.append((key, str(s.predicted), str(s.gold), str(s.matched),
                     f"{p:.4f}", f"{r:.4f}", f"{f:.4f}"))
    rows.append(("TOTAL", str(report.predicted), str(report.gold),
                 str(report.matched), f"{report.precision:.4f}",
                 f"{report.recall:.4f}", f"{report.f1:.4f}"))
    widths = [max(len(r[i]) for r in rows) for i in range(7)]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
             for row in rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, path) -> None:
    """JSON report at `path` plus an aligned text table alongside (.txt)."""
    path = Path(path)
    payload = {
        "precision": report.precision,
        "recall": report.recall,
        "f1": report.f1,
        "counts": {"predicted": report.predicted, "gold": report.gold,
                   "matched": report.matched,
                   "malformed_segments": report.malformed_segments},
        "per_key": {k: {"predicted": s.predicted, "gold": s.gold,
                        "matched": s.matched}
                    for k, s in sorted(report.per_key.items())},
    }
    path.write_text(json.dumps(payload, indent=1, sort_keys=True))
    path.with_suffix(".txt").write_text(format_table(report))


def load_report(path) -> EvalReport:
    payload = json.loads(Path(path).read_text())
    per_key = {k: KeyStats(predicted=v["predicted"], gold=v["gold"],
                           matched=v["matched"])
               for k, v in payload["per_key"].items()}
    c = payload["counts"]
    return EvalReport(precision=payload["precision"], recall=payload["recall"],
                      f1=payload["f1"], predicted=c["predicted"], gold=c["gold"],
                      matched=c["matched"],
                      malformed_segments=c["malformed_segments"], per_key=per_key)
