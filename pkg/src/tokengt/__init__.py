"""Pure graph Transformers: nodes and edges as tokens, with node and type identifiers.

Submodules:

- ``equivariant``: basis tensors, equivariant linear layers and k-IGN forward passes
- ``identifiers`` / ``tokenizer``: node and type identifiers and token sequences
- ``attention``: multi-head self-attention, Transformer layers, FAVOR+ kernel attention
- ``constructive``: explicit attention weights that reproduce equivariant layers
- ``experiments`` / ``regression``: the basis-approximation study and the identifier ablation
- ``estimators``: scikit-learn style wrappers
"""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.0.0"

from .equivariant import bell_number, enumerate_classes, equivariant_linear_apply, ign_forward
from .graphs import Graph, barabasi_albert, triangle_count
from .tokenizer import tokenize_dense, tokenize_sparse

__all__ = [
    "__version__",
    "Graph",
    "barabasi_albert",
    "triangle_count",
    "bell_number",
    "enumerate_classes",
    "equivariant_linear_apply",
    "ign_forward",
    "tokenize_sparse",
    "tokenize_dense",
]
