"""The four input feature streams: semantic, layout-x, layout-y, visual.

Layout embeddings sum three rows of a per-axis table, one per tuple element,
so tokens with equal tuples embed identically.  Visual features come from a
small edge-padded CNN pooled to a fixed grid, with one center-sampled RoI per
token; control tokens (except the sequence start, which sees the whole map)
use a learned null vector.  The four streams reach hidden width through
bias-free linear maps, keeping zero inputs at exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .layout import LayoutTuple
from .tensor import ShapeError, Tensor


@dataclass
class ModalStreams:
    sem: Tensor
    x: Tensor
    y: Tensor
    vis: Tensor

    def __post_init__(self):
        lengths = {t.shape[0] for t in (self.sem, self.x, self.y, self.vis)}
        if len(lengths) != 1:
            raise ShapeError(f"ModalStreams: stream lengths differ: {lengths}")

    def __len__(self) -> int:
        return self.sem.shape[0]

    def as_dict(self) -> dict[str, Tensor]:
        return {"sem": self.sem, "x": self.x, "y": self.y, "vis": self.vis}


MODALITIES = ("sem", "x", "y", "vis")


def _pool_factors(n: int) -> list[int]:
    """Split a downscale factor into at most three pooling stages."""
    factors = []
    rest = n
    for p in (2, 3, 5, 7):
        while rest % p == 0 and len(factors) < 3:
            factors.append(p)
            rest //= p
    if rest > 1:
        factors.append(rest)
    while len(factors) > 3:
        factors[-2] *= factors[-1]
        factors.pop()
    return factors


@dataclass(frozen=True)
class VisualConfig:
    image_side: int = 512
    channels: tuple[int, int, int] = (8, 16, 32)
    down_scale: int = 4  # pooled map is image_side / down_scale per axis
    roi_size: int = 2    # RoI bins per axis

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        if self.down_scale < 1:
            raise ValueError("VisualConfig: down_scale must be >= 1")
        if self.image_side % self.down_scale:
            raise ValueError(f"VisualConfig: image side {self.image_side} not "
                             f"divisible by down_scale {self.down_scale}")

    @property
    def map_side(self) -> int:
        return self.image_side // self.down_scale

    @property
    def flat_features(self) -> int:
        return self.channels[-1] * self.roi_size * self.roi_size


def layout_index_arrays(layouts: list[LayoutTuple]):
    xs = np.array([[t.x[0], t.x[1], t.x[2]] for t in layouts], dtype=np.intp)
    ys = np.array([[t.y[0], t.y[1], t.y[2]] for t in layouts], dtype=np.intp)
    return xs, ys


def embed_layouts(layouts: list[LayoutTuple], x_table: Tensor,
                  y_table: Tensor) -> tuple[Tensor, Tensor]:
    """Per-token x/y embeddings: table[x0] + table[x1] + table[w] (same for y)."""
    xs, ys = layout_index_arrays(layouts)
    ex = ops.add(ops.add(ops.embedding_lookup(x_table, xs[:, 0]),
                         ops.embedding_lookup(x_table, xs[:, 1])),
                 ops.embedding_lookup(x_table, xs[:, 2]))
    ey = ops.add(ops.add(ops.embedding_lookup(y_table, ys[:, 0]),
                         ops.embedding_lookup(y_table, ys[:, 1])),
                 ops.embedding_lookup(y_table, ys[:, 2]))
    return ex, ey


def backbone_forward(params: dict[str, Tensor], image: np.ndarray,
                     cfg: VisualConfig) -> Tensor:
    """Image (S, S) -> feature map (C, S/n, S/n) via conv blocks + pooling."""
    if image.shape != (cfg.image_side, cfg.image_side):
        raise ShapeError(f"backbone_forward: image shape {image.shape} != "
                         f"({cfg.image_side}, {cfg.image_side})")
    x = Tensor(image.reshape(1, 1, cfg.image_side, cfg.image_side)
               .astype(params["vis.conv1.w"].dtype))
    pools = _pool_factors(cfg.down_scale)
    for i in range(3):
        x = ops.conv2d(x, params[f"vis.conv{i + 1}.w"], params[f"vis.conv{i + 1}.b"],
                       padding=1, pad_mode="edge")
        x = ops.relu(x)
        if i < len(pools):
            x = ops.avg_pool2d(x, pools[i])
    return ops.slice_(x, (0,))  # (C, map, map)


def visual_features(feature_map: Tensor, layouts: list[LayoutTuple],
                    use_roi: list[bool], proj_w: Tensor, proj_b: Tensor,
                    null_vec: Tensor, max_scale: int, roi_size: int) -> Tensor:
    """(N, d_v) visual vectors: RoI-pooled + projected where use_roi, else null."""
    n = len(layouts)
    if len(use_roi) != n:
        raise ShapeError(f"visual_features: {n} layouts vs {len(use_roi)} roi flags")
    d_v = null_vec.shape[0]
    roi_rows = [i for i, u in enumerate(use_roi) if u]
    null_mask = np.array([[0.0 if u else 1.0] for u in use_roi],
                         dtype=null_vec.dtype)
    null_part = ops.mul(Tensor(null_mask), ops.reshape(null_vec, (1, d_v)))
    if not roi_rows:
        return null_part
    _, hm, wm = feature_map.shape
    scale_x = wm / max_scale
    scale_y = hm / max_scale
    rois = np.array([[layouts[i].x[0] * scale_x, layouts[i].y[0] * scale_y,
                      layouts[i].x[1] * scale_x, layouts[i].y[1] * scale_y]
                     for i in roi_rows])
    pooled = ops.roi_align(feature_map, rois, roi_size)  # (R, C, P, P)
    flat = ops.reshape(pooled, (len(roi_rows), -1))
    projected = ops.linear(flat, proj_w, proj_b)  # (R, d_v)
    select = np.zeros((n, len(roi_rows)), dtype=null_vec.dtype)
    for r, i in enumerate(roi_rows):
        select[i, r] = 1.0
    return ops.add(ops.matmul(Tensor(select), projected), null_part)


def assemble_streams(params: dict[str, Tensor], token_ids, layouts: list[LayoutTuple],
                     visual: Tensor | None) -> ModalStreams:
    """Project the four raw feature sequences to hidden width (no biases)."""
    ids = np.asarray(token_ids)
    n = len(ids)
    if len(layouts) != n or (visual is not None and visual.shape[0] != n):
        raise ShapeError(f"assemble_streams: sequence lengths differ "
                         f"(ids={n}, layouts={len(layouts)}, "
                         f"visual={None if visual is None else visual.shape[0]})")
    sem_raw = ops.embedding_lookup(params["embed.token"], ids)
    x_raw, y_raw = embed_layouts(layouts, params["embed.x"], params["embed.y"])
    if visual is None:
        d_v = params["map.vis"].shape[0]
        visual = Tensor(np.zeros((n, d_v), dtype=params["map.vis"].dtype))
    return ModalStreams(
        sem=ops.matmul(sem_raw, params["map.sem"]),
        x=ops.matmul(x_raw, params["map.x"]),
        y=ops.matmul(y_raw, params["map.y"]),
        vis=ops.matmul(visual, params["map.vis"]),
    )
