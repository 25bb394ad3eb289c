"""Adaptive block-sparse attention for spatio-temporal transformers."""

from .attention import (
    AttentionGrad,
    FlopCounter,
    attention_backward,
    block_sparse_attention,
    dense_attention,
    masked_dense_attention,
)
from .errors import (
    DivergenceError,
    FormatError,
    GeometryError,
    IoError,
    NablaError,
    ParamError,
    ValidationError,
)
from .layout import Permutation, TokenGrid, apply_reorder, build_permutation
from .masks import (
    BlockMask,
    NablaParams,
    StaWindow,
    count_dense_blocks_eq5,
    export_mask_image,
    join_masks,
    load_mask,
    nabla_mask,
    save_mask,
    sparsity,
    sta_mask,
)
from .tensor_io import as_tensor, load_tensor, save_tensor

__version__ = "0.1.0"
