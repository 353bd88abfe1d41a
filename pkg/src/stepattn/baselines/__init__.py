"""Non-attention imputers: fills, kNN, regression and chained-equation imputation.

Submodules: :mod:`.fills`, :mod:`.knn`, :mod:`.regression`, :mod:`.iterative`.
"""

from .fills import FillSpec, fill_impute, fill_rates

__all__ = ["FillSpec", "fill_impute", "fill_rates"]
