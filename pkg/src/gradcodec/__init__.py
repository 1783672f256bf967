"""Lognormal models of gradient tensors, low-bit float formats, stochastic pruning and encoding."""

from .distfit import FitReport, LognormalParams, fit_lognormal, fit_report, ks_statistic
from .encode import EncodedStream, compression_ratio, decode_stream, encode_stream
from .errors import DomainError, FormatError, GradcodecError, InsufficientDataError, TruncatedError
from .fpquant import (
    FpFormat,
    QuantizedTensor,
    allocation_table,
    expected_relative_error_lognormal,
    expected_relative_error_normal,
    gradient_scale,
    optimal_allocation,
    quantize_tensor,
    quantize_value,
)
from .mcsim import SimConfig, empirical_cosine, empirical_relative_error, empirical_sparsity, sample_lognormal
from .prune import (
    CosineReport,
    LayerProfile,
    PruneSpec,
    analytic_cosine,
    bimodal_threshold,
    heterogeneous_allocate,
    predict_and_prune,
    sparsity_given_threshold,
    stochastic_prune,
    threshold_for_sparsity,
)
from .tensorio import TensorDump, ZeroMask, read_tensor, write_tensor

__version__ = "0.1.0"
