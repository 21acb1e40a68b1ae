"""dynaug: extend multivariate time series by LSTM dynamic forecasting and
validate the augmentation with cross-validated age regression."""

from . import dataset, forecast, numerics, pipeline, predict, tsaf

__version__ = "0.1.0"

__all__ = ["dataset", "forecast", "numerics", "pipeline", "predict", "tsaf", "__version__"]
