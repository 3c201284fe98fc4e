"""2-d coordinate tuples that replace 1-d positional encoding.

Each token carries (x0, x1, w) and (y0, y1, h) quantized to [0, max_scale].
Source tokens slice their fragment box along x so within-fragment order is
geometric, not positional; generated tokens live on a virtual unit-pixel grid
filled row-first.  Nothing here reads a token's sequence index, which is what
makes source order irrelevant to the model.
"""

from __future__ import annotations

from dataclasses import dataclass

DEFAULT_MAX_SCALE = 1000


@dataclass(frozen=True)
class LayoutTuple:
    x: tuple[int, int, int]  # (x0, x1, w)
    y: tuple[int, int, int]  # (y0, y1, h)


def normalize_box(box, page_w: int, page_h: int,
                  max_scale: int = DEFAULT_MAX_SCALE) -> tuple[int, int, int, int]:
    """floor(coord * max_scale / page_dim), clamped into [0, max_scale]."""
    if page_w <= 0 or page_h <= 0:
        raise ValueError(f"normalize_box: page dimensions must be positive, "
                         f"got {page_w}x{page_h}")
    x0, y0, x1, y1 = box

    def q(v, dim):
        return min(max((v * max_scale) // dim, 0), max_scale)

    return (q(x0, page_w), q(y0, page_h), q(x1, page_w), q(y1, page_h))


def source_layout(qbox, token_index: int, n_tokens: int,
                  shared_box: bool = False) -> LayoutTuple:
    """Tuple for token k of a fragment's n_tokens; qbox is already quantized.

    The x-range splits into n_tokens equal slices of width w = floor(span / n);
    every token shares the fragment's full y extent.  With shared_box the
    slicing is disabled and all tokens carry the fragment corners.
    """
    if n_tokens < 1:
        raise ValueError(f"source_layout: n_tokens must be >= 1, got {n_tokens}")
    x0, y0, x1, y1 = qbox
    w = (x1 - x0) // n_tokens
    if shared_box:
        xt = (x0, x1, w)
    else:
        lo = x0 + token_index * w
        xt = (lo, lo + w, w)
    return LayoutTuple(x=xt, y=(y0, y1, y1 - y0))


def special_layout(is_pad: bool, w: int = DEFAULT_MAX_SCALE,
                   h: int = DEFAULT_MAX_SCALE) -> LayoutTuple:
    """Empty box for [PAD]; page-extent box for the other control tokens."""
    if is_pad:
        return LayoutTuple(x=(0, 0, 0), y=(0, 0, 0))
    return LayoutTuple(x=(0, w, w), y=(0, h, h))


def target_grid_layout(step: int, grid_w: int, grid_h: int) -> LayoutTuple:
    """Unit-pixel cell for generated token at step t, filled row-first."""
    if step < 0 or step >= grid_w * grid_h:
        raise ValueError(f"target_grid_layout: step {step} outside "
                         f"{grid_w}x{grid_h} grid")
    col = step % grid_w
    row = step // grid_w
    return LayoutTuple(x=(col, col + 1, 1), y=(row, row + 1, 1))
