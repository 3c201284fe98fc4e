"""Score-fused multi-head attention over the four modal streams.

Each modality scores attention with its own projections; the per-head scores
are summed into one fusion score, masked additively, and a single softmax
drives every modality's value aggregation.  Semantic parameters are per
layer while the x / y / visual parameter sets are shared by all layers.
Masks are {0, -inf} matrices: source positions see each other fully, target
positions see all of the source plus already-decoded targets, and padding
columns are never attendable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .embeddings import MODALITIES, ModalStreams
from .tensor import ShapeError, Tensor

MASK_MODES = ("bidirectional", "unidirectional", "seq2seq", "ner")


@dataclass
class MaskSpec:
    matrix: np.ndarray  # (N, N) additive, entries in {0, -inf}
    mode: str
    src_len: int
    tgt_len: int


def build_mask(mode: str, src_len: int, tgt_len: int = 0, uni_order=None,
               pad_positions=(), dtype=np.float64) -> MaskSpec:
    """Access-control matrix for one forward pass.

    uni_order ranks source positions for the unidirectional mode (defaults to
    index order); pad_positions are absolute column indices nobody may attend.
    """
    if mode not in MASK_MODES:
        raise ValueError(f"build_mask: unknown mode {mode!r}")
    total = src_len + tgt_len
    if total == 0:
        raise ValueError("build_mask: src_len and tgt_len are both zero")
    if mode in ("bidirectional", "unidirectional") and tgt_len:
        raise ValueError(f"build_mask: mode {mode!r} takes no target segment")
    neg = -np.inf
    m = np.zeros((total, total), dtype=dtype)
    if mode == "unidirectional":
        rank = np.arange(src_len) if uni_order is None else np.asarray(uni_order)
        if rank.shape != (src_len,):
            raise ValueError(f"build_mask: uni_order must have length {src_len}")
        m[rank[None, :] > rank[:, None]] = neg
    elif mode in ("seq2seq", "ner"):
        m[:src_len, src_len:] = neg
        for t in range(tgt_len):
            m[src_len + t, src_len + t + 1:] = neg
    for p in pad_positions:
        m[:, p] = neg
    if np.isneginf(m).all(axis=1).any():
        raise ValueError("build_mask: some row has no attendable column")
    return MaskSpec(matrix=m, mode=mode, src_len=src_len, tgt_len=tgt_len)


def score_divisor(d_k: int, score_norm: str) -> float:
    if score_norm == "fourth_root":
        return float(d_k) ** 0.25
    if score_norm == "sqrt":
        return float(d_k) ** 0.5
    raise ValueError(f"unknown score_norm {score_norm!r}")


def _head_slice(t: Tensor, head: int, d_k: int) -> Tensor:
    return ops.slice_(t, (slice(None), slice(head * d_k, (head + 1) * d_k)))


def modal_score(stream: Tensor, wq: Tensor, wk: Tensor, head: int, n_heads: int,
                score_norm: str = "fourth_root") -> Tensor:
    """One modality's (N, N) attention scores for one head, before masking."""
    d_h = stream.shape[1]
    if d_h % n_heads:
        raise ShapeError(f"modal_score: hidden width {d_h} not divisible by "
                         f"{n_heads} heads")
    d_k = d_h // n_heads
    q = _head_slice(ops.matmul(stream, wq), head, d_k)
    k = _head_slice(ops.matmul(stream, wk), head, d_k)
    return ops.scale(ops.matmul(q, ops.transpose(k)), 1.0 / score_divisor(d_k, score_norm))


def fuse_and_attend(streams: ModalStreams, mask, params_by_mod: dict,
                    n_heads: int, score_norm: str = "fourth_root",
                    cache: dict | None = None, trace: dict | None = None,
                    ) -> tuple[dict[str, Tensor], dict[str, tuple[np.ndarray, np.ndarray]]]:
    """Attention sub-layer outputs per modality (before residual/norm).

    With a cache, `streams` holds only the new positions and keys/values are
    the cached rows followed by the new ones.  Returns the outputs plus each
    modality's freshly projected key/value rows for cache updates.
    """
    sdict = streams.as_dict()
    n, d_h = sdict["sem"].shape
    if d_h % n_heads:
        raise ShapeError(f"fuse_and_attend: hidden width {d_h} not divisible by "
                         f"{n_heads} heads")
    d_k = d_h // n_heads
    divisor = score_divisor(d_k, score_norm)
    mask_arr = mask.matrix if isinstance(mask, MaskSpec) else mask
    if mask_arr is not None and np.shape(mask_arr)[0] != n:
        raise ShapeError(f"fuse_and_attend: mask rows {np.shape(mask_arr)[0]} != "
                         f"sequence length {n}")

    proj: dict[str, tuple[Tensor, Tensor, Tensor]] = {}
    new_kv: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for m in MODALITIES:
        p = params_by_mod[m]
        q = ops.matmul(sdict[m], p["wq"])
        k = ops.matmul(sdict[m], p["wk"])
        v = ops.matmul(sdict[m], p["wv"])
        new_kv[m] = (k.data, v.data)
        if cache is not None:
            k_prev, v_prev = cache[m]
            k = ops.concatenate([Tensor(k_prev), k], axis=0)
            v = ops.concatenate([Tensor(v_prev), v], axis=0)
        proj[m] = (q, k, v)

    head_outs: dict[str, list[Tensor]] = {m: [] for m in MODALITIES}
    for h in range(n_heads):
        fused = None
        raw = {}
        for m in MODALITIES:
            q, k, _ = proj[m]
            s = ops.scale(ops.matmul(_head_slice(q, h, d_k),
                                     ops.transpose(_head_slice(k, h, d_k))),
                          1.0 / divisor)
            raw[m] = s
            fused = s if fused is None else ops.add(fused, s)
        att = ops.softmax(fused, mask_arr)
        if trace is not None and trace.get("head") == h:
            trace["scores"] = {m: raw[m].data.copy() for m in MODALITIES}
            trace["fused"] = att.data.copy()
        for m in MODALITIES:
            head_outs[m].append(ops.matmul(att, _head_slice(proj[m][2], h, d_k)))

    outputs = {m: ops.matmul(ops.concatenate(head_outs[m], axis=1),
                             params_by_mod[m]["wo"]) for m in MODALITIES}
    return outputs, new_kv


def fused_layer(streams: ModalStreams, mask, params_by_mod: dict, n_heads: int,
                score_norm: str = "fourth_root", static_layout_streams: bool = False,
                cache: dict | None = None, dropout_rate: float = 0.0,
                dropout_rng: np.random.Generator | None = None,
                trace: dict | None = None,
                ) -> tuple[ModalStreams, dict[str, tuple[np.ndarray, np.ndarray]]]:
    """Attention + feed-forward block with residuals and layer norms.

    By default every stream evolves under the fused attention; with
    static_layout_streams only the semantic stream updates and x / y / visual
    pass through unchanged.
    """
    att, new_kv = fuse_and_attend(streams, mask, params_by_mod, n_heads,
                                  score_norm, cache=cache, trace=trace)
    out: dict[str, Tensor] = {}
    for m in MODALITIES:
        if static_layout_streams and m != "sem":
            out[m] = streams.as_dict()[m]
            continue
        p = params_by_mod[m]
        a = ops.dropout(att[m], dropout_rate, dropout_rng)
        h1 = ops.layer_norm(ops.add(a, streams.as_dict()[m]), p["ln1_g"], p["ln1_b"])
        ff = ops.linear(ops.gelu(ops.linear(h1, p["ff1_w"], p["ff1_b"])),
                        p["ff2_w"], p["ff2_b"])
        ff = ops.dropout(ff, dropout_rate, dropout_rng)
        out[m] = ops.layer_norm(ops.add(ff, h1), p["ln2_g"], p["ln2_b"])
    return ModalStreams(**out), new_kv
