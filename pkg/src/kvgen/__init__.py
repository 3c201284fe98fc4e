"""kvgen: generative key-value extraction from OCR'd documents.

Token streams are encoded through decoupled semantic / layout-x / layout-y /
visual channels whose attention scores are fused before softmax, so the model
never sees 1-d reading order and structured output is produced by generation
rather than per-token labeling.
"""

from .tensor import Tensor, ShapeError, backward, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "ShapeError", "backward", "no_grad", "__version__"]
