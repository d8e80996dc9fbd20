"""Disentangled implicit neural representations for inverse imaging.

A shared encoder-decoder pair learns population structure across
subjects while a small per-subject encoder captures each individual.
At test time only a fresh subject encoder is fitted to new measurements
through a differentiable forward model (identity, fan-beam CT or
undersampled Fourier MRI).

Setting ``DISINR_THREADS`` before the first import caps the BLAS and
OpenMP thread pools.
"""

import os

_threads = os.environ.get("DISINR_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

from . import diffcore, encoders, models, physics, data, evaluation, training  # noqa: E402
from .errors import (  # noqa: E402
    ConfigError, DimensionError, DisINRError, DivergenceError, DomainError, EvaluationError,
)
from .models import DisINR, ModelConfig, NaiveINR, StrainerLike  # noqa: E402
from .training import TrainConfig, adapt, fit_naive, pretrain  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "diffcore", "encoders", "models", "physics", "data", "evaluation", "training",
    "ConfigError", "DimensionError", "DisINRError", "DivergenceError", "DomainError",
    "EvaluationError", "DisINR", "ModelConfig", "NaiveINR", "StrainerLike", "TrainConfig",
    "adapt", "fit_naive", "pretrain",
]
