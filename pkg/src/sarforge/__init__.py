"""Synthetic MRI SAR prediction: phantoms, field solves, 1g SAR and a numpy U-Net."""
__version__ = "0.1.0"

from .estimator import SarUNetRegressor, check_raster_batch, check_raster_pair

__all__ = ["SarUNetRegressor", "check_raster_batch", "check_raster_pair", "__version__"]
