"""roidense: a CPU-only detection/segmentation/classification stack.

The library provides, from scratch on top of plain array arithmetic:

* a dense 4-axis tensor type with a binary record format and a
  finite-difference gradient checker (``roidense.tensor``),
* feedforward primitives with paired backward passes (``roidense.nn``),
* bilinear roi alignment and quantized roi pooling (``roidense.roi``),
* the multi-task detection loss stack and box parameterization
  (``roidense.losses``),
* densely connected classifier networks (``roidense.densenet``),
* evaluation metrics including ranking AUC and segmentation recall
  (``roidense.metrics``),
* a deterministic synthetic-phantom dataset (``roidense.synth``),
* the anchor-grid detector and training loops (``roidense.pipeline``),
* finite-difference verification of every backward pass
  (``roidense.gradcheck``),

plus a command-line tool (``roidense``) that ties generation, training,
evaluation and verification together, writing CSV reports with rendered
figures beside them.
"""

from .tensor import (Shape, Tensor, concat_channels, finite_difference_gradient,
                     max_relative_error, reduce, split_channels)

__all__ = [
    "Shape",
    "Tensor",
    "concat_channels",
    "split_channels",
    "reduce",
    "finite_difference_gradient",
    "max_relative_error",
]

__version__ = "0.1.0"
