"""The stacked encoder/decoder: one parameter set serves both roles.

Source tokens are encoded with full bidirectional attention while their
per-layer key/value projections are cached; generation then runs one token at
a time against that memory under the seq2seq access rule, so step-wise
decoding reproduces the teacher-forced forward exactly (up to float
re-association).  The prediction head reads the final semantic stream and is
tied to the token embedding by default.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import ops
from .attention import MaskSpec, build_mask, fused_layer
from .documents import Document
from .embeddings import (MODALITIES, ModalStreams, VisualConfig, assemble_streams,
                         backbone_forward, visual_features)
from .layout import LayoutTuple, normalize_box, source_layout, special_layout, \
    target_grid_layout
from .synth import render_document
from .tensor import ShapeError, Tensor, no_grad
from .vocab import Vocab

EXPORT_NAMES = {"sem": "S", "x": "X", "y": "Y", "vis": "V"}


@dataclass
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    d_h: int = 64
    n_heads: int = 2
    d_s: int | None = None  # raw feature widths; default to d_h
    d_x: int | None = None
    d_y: int | None = None
    d_v: int | None = None
    max_scale: int = 1000
    max_src_len: int = 768
    max_tgt_len: int = 256
    grid_w: int = 64
    grid_h: int = 64
    ff_mult: int = 4
    visual_enabled: bool = False
    visual: VisualConfig = field(default_factory=VisualConfig)
    score_norm: str = "fourth_root"
    static_layout_streams: bool = False
    add_1d_position: bool = False
    fragment_shared_boxes: bool = False
    tie_head: bool = True
    dtype: str = "float64"
    dropout: float = 0.1

    def __post_init__(self):
        if isinstance(self.visual, dict):
            self.visual = VisualConfig(**self.visual)
        for name in ("d_s", "d_x", "d_y", "d_v"):
            if getattr(self, name) is None:
                setattr(self, name, self.d_h)
        if self.d_h % self.n_heads:
            raise ValueError(f"d_h={self.d_h} not divisible by n_heads={self.n_heads}")
        if self.tie_head and self.d_s != self.d_h:
            raise ValueError("tie_head requires d_s == d_h")
        if min(self.n_layers, self.max_src_len, self.max_tgt_len, self.vocab_size) < 1:
            raise ValueError("n_layers, max lengths and vocab_size must be >= 1")
        if self.grid_w * self.grid_h < self.max_tgt_len:
            raise ValueError(f"decode grid {self.grid_w}x{self.grid_h} smaller "
                             f"than max_tgt_len={self.max_tgt_len}")
        if max(self.grid_w, self.grid_h) > self.max_scale:
            raise ValueError("decode grid indices exceed the coordinate table")
        if self.score_norm not in ("fourth_root", "sqrt"):
            raise ValueError(f"unknown score_norm {self.score_norm!r}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"unknown dtype {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"ModelConfig: unknown keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class SourceBatch:
    ids: np.ndarray
    fragment_index: list[int | None]
    layouts: list[LayoutTuple]
    use_roi: list[bool]
    pad_positions: np.ndarray
    n_tokens: int
    image: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class DecodeMemory:
    keys: list[dict[str, np.ndarray]]    # per layer: modality -> (count, d_h)
    values: list[dict[str, np.ndarray]]
    col_mask: np.ndarray                 # (1, count) additive 0 / -inf
    src_len: int
    steps: int = 0
    layouts: list[LayoutTuple] = field(default_factory=list)

    @property
    def count(self) -> int:
        return self.col_mask.shape[1]


_MODAL_SHAPES = (
    ("wq", "dd"), ("wk", "dd"), ("wv", "dd"), ("wo", "dd"),
    ("ff1.w", "dff"), ("ff1.b", "ff"), ("ff2.w", "ffd"), ("ff2.b", "d"),
    ("ln1.g", "d"), ("ln1.b", "d"), ("ln2.g", "d"), ("ln2.b", "d"),
)


def init_params(config: ModelConfig, seed: int = 0,
                init_scale: float = 0.02) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    dt = config.np_dtype
    d, ff = config.d_h, config.ff_mult * config.d_h

    def normal(*shape, s=init_scale):
        return Tensor((rng.standard_normal(shape) * s).astype(dt), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dt), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=dt), requires_grad=True)

    p: dict[str, Tensor] = {
        "embed.token": normal(config.vocab_size, config.d_s),
        "embed.x": normal(config.max_scale + 1, config.d_x),
        "embed.y": normal(config.max_scale + 1, config.d_y),
        "embed.null_vis": normal(config.d_v),
        "map.sem": normal(config.d_s, d),
        "map.x": normal(config.d_x, d),
        "map.y": normal(config.d_y, d),
        "map.vis": normal(config.d_v, d),
    }
    if config.add_1d_position:
        p["embed.pos1d"] = normal(config.max_src_len + config.max_tgt_len, d,
                                  s=max(init_scale, 0.1))
    if config.visual_enabled:
        c1, c2, c3 = config.visual.channels
        p["vis.conv1.w"] = normal(c1, 1, 3, 3, s=0.1)
        p["vis.conv1.b"] = zeros(c1)
        p["vis.conv2.w"] = normal(c2, c1, 3, 3, s=0.1)
        p["vis.conv2.b"] = zeros(c2)
        p["vis.conv3.w"] = normal(c3, c2, 3, 3, s=0.1)
        p["vis.conv3.b"] = zeros(c3)
        p["vis.proj.w"] = normal(config.visual.flat_features, config.d_v)
        p["vis.proj.b"] = zeros(config.d_v)
    if not config.tie_head:
        p["head.w"] = normal(d, config.vocab_size)

    sizes = {"dd": (d, d), "dff": (d, ff), "ffd": (ff, d), "ff": (ff,), "d": (d,)}
    for block in [f"layer{i}.sem" for i in range(config.n_layers)] + \
                 ["shared.x", "shared.y", "shared.vis"]:
        for name, kind in _MODAL_SHAPES:
            key = f"{block}.{name}"
            if name.startswith("ln") and name.endswith(".g"):
                p[key] = ones(*sizes[kind])
            elif name.endswith(".b") or kind == "ff":
                p[key] = zeros(*sizes[kind])
            else:
                p[key] = normal(*sizes[kind])
    return p


class KVGenModel:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0,
             init_scale: float = 0.02) -> "KVGenModel":
        return cls(config, init_params(config, seed, init_scale))

    # -- parameter plumbing ------------------------------------------------

    def layer_params(self, layer: int) -> dict[str, dict[str, Tensor]]:
        """Per-modality weight dict for one layer: semantic weights are that
        layer's own, x / y / visual come from the shared single instances."""
        out = {}
        for m in MODALITIES:
            block = f"layer{layer}.sem" if m == "sem" else f"shared.{m}"
            out[m] = {name: self.params[f"{block}.{name}"]
                      for name, _ in _MODAL_SHAPES}
            out[m] = {k.replace(".", "_"): v for k, v in out[m].items()}
        return out

    def grads(self) -> dict[str, np.ndarray]:
        return {k: t.grad for k, t in self.params.items() if t.grad is not None}

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None

    # -- input preparation ---------------------------------------------------

    def prepare_source(self, doc: Document, vocab: Vocab, order: str = "spatial",
                       pad_to: int | None = None) -> SourceBatch:
        from .documents import encode_source as corpus_encode
        enc = corpus_encode(doc, vocab, pad_to, order=order)
        if len(enc.ids) > self.config.max_src_len:
            raise ValueError(f"source length {len(enc.ids)} exceeds "
                             f"max_src_len={self.config.max_src_len}")
        alpha = self.config.max_scale
        qboxes = [normalize_box(f.box, doc.page_width, doc.page_height, alpha)
                  for f in doc.fragments]
        # run lengths per fragment occurrence so each token knows k of K
        layouts: list[LayoutTuple] = []
        use_roi: list[bool] = []
        i = 0
        n = len(enc.ids)
        while i < n:
            fi = enc.fragment_index[i]
            if fi is None:
                is_pad = enc.ids[i] == vocab.pad_id
                layouts.append(special_layout(is_pad, alpha, alpha))
                use_roi.append(enc.ids[i] == vocab.beg_id)
                i += 1
                continue
            j = i
            while j < n and enc.fragment_index[j] == fi:
                j += 1
            count = j - i
            for k in range(count):
                layouts.append(source_layout(qboxes[fi], k, count,
                                             self.config.fragment_shared_boxes))
                use_roi.append(True)
            i = j
        ids = np.asarray(enc.ids)
        image = None
        if self.config.visual_enabled:
            side = self.config.visual.image_side
            if doc.image is not None:
                image = _load_gray(doc.image, side)
            else:
                image = render_document(doc, side)
        return SourceBatch(ids=ids, fragment_index=enc.fragment_index,
                           layouts=layouts, use_roi=use_roi,
                           pad_positions=np.where(ids == vocab.pad_id)[0],
                           n_tokens=enc.n_tokens, image=image)

    def source_streams(self, sb: SourceBatch) -> ModalStreams:
        visual = None
        if self.config.visual_enabled:
            if sb.image is None:
                raise ValueError("visual modality enabled but no image available")
            fmap = backbone_forward(self.params, sb.image, self.config.visual)
            visual = visual_features(fmap, sb.layouts, sb.use_roi,
                                     self.params["vis.proj.w"], self.params["vis.proj.b"],
                                     self.params["embed.null_vis"],
                                     self.config.max_scale, self.config.visual.roi_size)
        streams = assemble_streams(self.params, sb.ids, sb.layouts, visual)
        if self.config.add_1d_position:
            streams = self._add_pos1d(streams, np.arange(len(sb.ids)))
        return streams

    def target_streams(self, tgt_ids, first_step: int = 0) -> ModalStreams:
        """Decode-side rows: grid layouts, null visual, no RoI."""
        ids = np.asarray(tgt_ids)
        layouts = [target_grid_layout(first_step + j, self.config.grid_w,
                                      self.config.grid_h) for j in range(len(ids))]
        visual = None
        if self.config.visual_enabled:
            null = ops.reshape(self.params["embed.null_vis"], (1, self.config.d_v))
            ones_col = Tensor(np.ones((len(ids), 1), dtype=self.config.np_dtype))
            visual = ops.mul(ones_col, null)
        return assemble_streams(self.params, ids, layouts, visual)

    def _add_pos1d(self, streams: ModalStreams, positions: np.ndarray) -> ModalStreams:
        pos = ops.embedding_lookup(self.params["embed.pos1d"], positions)
        return ModalStreams(sem=ops.add(streams.sem, pos), x=streams.x,
                            y=streams.y, vis=streams.vis)

    # -- forward passes ------------------------------------------------------

    def run_stack(self, streams: ModalStreams, mask: MaskSpec | np.ndarray,
                  collect_kv: bool = False,
                  dropout_rng: np.random.Generator | None = None,
                  trace_layer: int | None = None, trace: dict | None = None):
        cfg = self.config
        collected = [] if collect_kv else None
        for i in range(cfg.n_layers):
            layer_trace = trace if (trace is not None and i == trace_layer) else None
            streams, new_kv = fused_layer(
                streams, mask, self.layer_params(i), cfg.n_heads,
                score_norm=cfg.score_norm,
                static_layout_streams=cfg.static_layout_streams,
                dropout_rate=cfg.dropout if dropout_rng is not None else 0.0,
                dropout_rng=dropout_rng, trace=layer_trace)
            if collect_kv:
                collected.append(new_kv)
        return streams, collected

    def head_logits(self, rows: Tensor) -> Tensor:
        if self.config.tie_head:
            return ops.matmul(rows, ops.transpose(self.params["embed.token"]))
        return ops.matmul(rows, self.params["head.w"])

    def forward_teacher_forced(self, sb: SourceBatch, tgt_ids, mode: str = "seq2seq",
                               logit_positions=None,
                               dropout_rng: np.random.Generator | None = None,
                               uni_order=None) -> Tensor:
        """Single full forward; returns logits at the requested positions
        (defaults to every target row for seq2seq/ner)."""
        cfg = self.config
        tgt_ids = np.asarray(tgt_ids, dtype=np.intp)
        src_len, tgt_len = len(sb.ids), len(tgt_ids)
        if tgt_len > cfg.max_tgt_len:
            raise ValueError(f"target length {tgt_len} exceeds max_tgt_len={cfg.max_tgt_len}")
        mask = build_mask(mode, src_len, tgt_len, uni_order=uni_order,
                          pad_positions=sb.pad_positions, dtype=cfg.np_dtype)
        streams = self.source_streams(sb)
        if tgt_len:
            tstreams = self.target_streams(tgt_ids)
            if cfg.add_1d_position:
                tstreams = self._add_pos1d(tstreams, src_len + np.arange(tgt_len))
            streams = ModalStreams(**{m: ops.concatenate(
                [streams.as_dict()[m], tstreams.as_dict()[m]], axis=0)
                for m in MODALITIES})
        final, _ = self.run_stack(streams, mask, dropout_rng=dropout_rng)
        if logit_positions is None:
            if mode not in ("seq2seq", "ner"):
                raise ValueError("logit_positions required for cloze modes")
            logit_positions = src_len + np.arange(tgt_len)
        rows = ops.take_rows(final.sem, np.asarray(logit_positions, dtype=np.intp))
        return self.head_logits(rows)

    # -- incremental decoding --------------------------------------------------

    def encode_source(self, sb: SourceBatch) -> tuple[ModalStreams, DecodeMemory]:
        cfg = self.config
        src_len = len(sb.ids)
        mask = build_mask("bidirectional", src_len, pad_positions=sb.pad_positions,
                          dtype=cfg.np_dtype)
        with no_grad():
            streams = self.source_streams(sb)
            final, collected = self.run_stack(streams, mask, collect_kv=True)
        col_mask = np.zeros((1, src_len), dtype=cfg.np_dtype)
        col_mask[0, sb.pad_positions] = -np.inf
        memory = DecodeMemory(
            keys=[{m: kv[m][0] for m in MODALITIES} for kv in collected],
            values=[{m: kv[m][1] for m in MODALITIES} for kv in collected],
            col_mask=col_mask, src_len=src_len)
        return final, memory

    def decode_step(self, memory: DecodeMemory, prev_token_id: int,
                    step: int) -> tuple[np.ndarray, DecodeMemory]:
        """Feed the previous token ([BEG] at step 1) and get next-token logits."""
        cfg = self.config
        if step < 1:
            raise ValueError(f"decode_step: step must be >= 1, got {step}")
        if step != memory.steps + 1:
            raise ValueError(f"decode_step: expected step {memory.steps + 1}, got {step}")
        if step > cfg.max_tgt_len:
            raise ValueError(f"decode_step: step {step} exceeds max_tgt_len={cfg.max_tgt_len}")
        grid = target_grid_layout(step - 1, cfg.grid_w, cfg.grid_h)
        with no_grad():
            streams = self.target_streams([prev_token_id], first_step=step - 1)
            if cfg.add_1d_position:
                streams = self._add_pos1d(streams, np.array([memory.src_len + step - 1]))
            col_mask = np.concatenate(
                [memory.col_mask, np.zeros((1, 1), dtype=cfg.np_dtype)], axis=1)
            for i in range(cfg.n_layers):
                cache = {m: (memory.keys[i][m], memory.values[i][m]) for m in MODALITIES}
                streams, new_kv = fused_layer(
                    streams, col_mask, self.layer_params(i), cfg.n_heads,
                    score_norm=cfg.score_norm,
                    static_layout_streams=cfg.static_layout_streams, cache=cache)
                for m in MODALITIES:
                    memory.keys[i][m] = np.concatenate([memory.keys[i][m], new_kv[m][0]])
                    memory.values[i][m] = np.concatenate([memory.values[i][m], new_kv[m][1]])
            logits = self.head_logits(streams.sem).data[0]
        memory.col_mask = col_mask
        memory.steps += 1
        memory.layouts.append(grid)
        return logits, memory

    def generate(self, sb: SourceBatch, vocab: Vocab) -> list[int]:
        """Greedy decode from [BEG] until [SEP] or the length cap."""
        _, memory = self.encode_source(sb)
        out: list[int] = []
        prev = vocab.beg_id
        for step in range(1, self.config.max_tgt_len + 1):
            logits, memory = self.decode_step(memory, prev, step)
            nxt = int(np.argmax(logits))
            if nxt == vocab.sep_id:
                break
            out.append(nxt)
            prev = nxt
        return out

    # -- attention export ------------------------------------------------------

    def export_attention(self, sb: SourceBatch, tgt_ids, vocab: Vocab,
                         layer: int, head: int) -> dict:
        cfg = self.config
        if not 0 <= layer < cfg.n_layers:
            raise ValueError(f"layer {layer} out of range [0, {cfg.n_layers})")
        if not 0 <= head < cfg.n_heads:
            raise ValueError(f"head {head} out of range [0, {cfg.n_heads})")
        tgt_ids = np.asarray(tgt_ids, dtype=np.intp)
        src_len, tgt_len = len(sb.ids), len(tgt_ids)
        mask = build_mask("seq2seq", src_len, tgt_len,
                          pad_positions=sb.pad_positions, dtype=cfg.np_dtype)
        trace: dict = {"head": head}
        with no_grad():
            streams = self.source_streams(sb)
            if tgt_len:
                tstreams = self.target_streams(tgt_ids)
                if cfg.add_1d_position:
                    tstreams = self._add_pos1d(tstreams, src_len + np.arange(tgt_len))
                streams = ModalStreams(**{m: ops.concatenate(
                    [streams.as_dict()[m], tstreams.as_dict()[m]], axis=0)
                    for m in MODALITIES})
            self.run_stack(streams, mask, trace_layer=layer, trace=trace)
        labels = [vocab.tokens[i] for i in sb.ids] + [vocab.tokens[i] for i in tgt_ids]
        maps = {EXPORT_NAMES[m]: trace["scores"][m] for m in MODALITIES}
        maps["fused"] = trace["fused"]
        return {"layer": layer, "head": head, "labels": labels, "maps": maps}

    # -- persistence -------------------------------------------------------------

    def save(self, path) -> None:
        arrays = {k: t.data for k, t in self.params.items()}
        np.savez(path, __config__=json.dumps(self.config.to_dict()), **arrays)

    @classmethod
    def load(cls, path) -> "KVGenModel":
        data = np.load(path, allow_pickle=False)
        config = ModelConfig.from_dict(json.loads(str(data["__config__"])))
        params = {k: Tensor(data[k].copy(), requires_grad=True)
                  for k in data.files if k != "__config__"}
        return cls(config, params)


def _load_gray(path: str, side: int) -> np.ndarray:
    """Load a .npy grayscale raster, nearest-resampled to (side, side)."""
    img = np.load(path)
    if img.ndim != 2:
        raise ValueError(f"image at {path} must be 2-d grayscale, got shape {img.shape}")
    if img.shape != (side, side):
        ri = (np.arange(side) * img.shape[0]) // side
        ci = (np.arange(side) * img.shape[1]) // side
        img = img[ri][:, ci]
    return img.astype(np.float64)
