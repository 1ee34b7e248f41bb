"""Cross-domain time-series forecasting with shared attention and an
adversarially trained domain discriminator, plus its single-domain baseline,
synthetic benchmarks, and evaluation tooling."""

__version__ = "0.1.0"

from . import data, evaluation, model, numerics, training  # noqa: F401
