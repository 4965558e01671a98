"""Top-down zero-shot human-object interaction detection on synthetic scenes.

The package is layered bottom-up: ``numerics`` (tape autodiff), ``semantics``
and ``taxonomy`` (frozen embeddings), ``nominators``, ``coattention``,
``detr_lite``, ``matching`` and ``losses``, then ``data``, ``evaluation``,
``model``, ``train`` and the ``cli``.
"""

from .numerics import Graph, NumericError, ShapeError, Tensor, finite_diff_check
from .semantics import EmbeddingTable, load_table, over_matrix, save_table
from .taxonomy import Taxonomy

__all__ = [
    "EmbeddingTable",
    "Graph",
    "NumericError",
    "ShapeError",
    "Taxonomy",
    "Tensor",
    "finite_diff_check",
    "load_table",
    "over_matrix",
    "save_table",
]

__version__ = "0.1.0"
