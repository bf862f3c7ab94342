"""Sensitivity-ordered, row-parallel layer-wise weight quantization (FastOBQ).

Quick start::

    from fastobq import build_hessian, fit_grid, fastobq_quantize_layer
    H = build_hessian(X, damping=0.1)
    g = fit_grid(W, bits=4)
    result = fastobq_quantize_layer(W, H, g, X=X)
"""

from .core import (
    ColumnSchedule,
    LayerResult,
    aggregate_column_sensitivity,
    fastobq_quantize_layer,
    layer_error,
    layer_error_normalized,
    schedule_columns,
)
from .grid import QuantGrid, fit_grid, quant_error, quantize, quantize_value
from .linalg import Hessian, HinvCounter, InverseHessian, build_hessian, downdate_inverse, invert_spd
from .obq import (
    OrderingStrategy,
    QuantTrace,
    compensate,
    obq_quantize_layer,
    obq_quantize_row,
    rtn_quantize_layer,
    sensitivity_scores,
)
from .tensor_io import LayerBundle, TensorFile, load_bundle, read_tensor, write_tensor

__version__ = "0.1.0"
