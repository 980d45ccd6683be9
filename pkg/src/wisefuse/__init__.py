"""Coarse-to-fine patch selection for tiled slide images.

Low-resolution patches are scored against class text embeddings after a
distillation head folds high-resolution region information into them; only
the children of the winning coarse patches are encoded at full resolution
and fused with similarity-weighted text vectors.
"""

from ._kernels import backend_name
from .distill import DistillHead, TrainConfig, head_forward, train
from .encoder import EncoderGateway, SyntheticProvider, synthetic_vector
from .evalkit import WorldParams, generate_world
from .pipeline import PipelineConfig, RuntimeLedger, bench, run_pipeline
from .selection import select_topk, similarity_matrix
from .store import EmbeddingStore, read_store, write_store
from .tiling import PatchGrid, otsu_threshold, tile_slide

__version__ = "0.1.0"

__all__ = [
    "DistillHead",
    "EmbeddingStore",
    "EncoderGateway",
    "PatchGrid",
    "PipelineConfig",
    "RuntimeLedger",
    "SyntheticProvider",
    "TrainConfig",
    "WorldParams",
    "backend_name",
    "bench",
    "generate_world",
    "head_forward",
    "otsu_threshold",
    "read_store",
    "run_pipeline",
    "select_topk",
    "similarity_matrix",
    "synthetic_vector",
    "tile_slide",
    "train",
    "write_store",
]
