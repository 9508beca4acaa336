"""Differentiable Whittaker smoothing of irregular, masked time series.

The smoother solves ``(W + D^T diag(lam) D) z = W x`` per series with a banded
Cholesky factorization, and back-propagates through the solve so penalty
weights can be learned from data by masked reconstruction.
"""

from ._backend import (available_backends, get_backend, get_num_threads, set_backend,
                       set_num_threads)
from .autodiff import Cotangents, FDReport, finite_diff_check, vjp
from .bandmat import (BandMatrix, band_from_dense, band_matvec, band_to_dense,
                      banded_cholesky_inplace, solve_factored)
from .diffop import DifferenceOperator, apply, apply_transpose, build_diffop, gram_banded
from .errors import (DataFormatError, DivergenceError, DomainError, NotPositiveDefinite,
                     StructuralError)
from .harness import (EvalReport, MaskingPlan, Standardizer, evaluate, make_masking, masked_loss,
                      metrics, standardize, synth_hetero, synth_sits)
from .io import load_series, save_series
from .regfit import (LossSpec, OptimizerSpec, RegularizerModel, emit_lambda, fit,
                     load_checkpoint, network_model, save_checkpoint, scalar_model, vector_model)
from .smoother import (LAMBDA_MAX, LAMBDA_MIN, SmootherContext, TimeSeriesBatch, build_omega,
                       interpolate, smooth_hetero, smooth_homo)

__version__ = '0.1.0'
