"""Desk-scale multi-variable air-pollution forecasting.

Aligned weather and air-quality data handling, a frequency-weighted MAE
objective for heavy-tailed pollutant values, and a dual-head vision
transformer evaluated against persistence.
"""

from pmcast._kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
