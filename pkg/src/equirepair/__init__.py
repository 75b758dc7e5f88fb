"""Equity-aware predict-then-optimize planning for post-storm power restoration.

The pipeline has two stages: calibrated repair-duration intervals from a
quantile regression forest with group-conditional conformal calibration,
and a constrained soft actor-critic that sequences regional repairs to
minimize average outage duration subject to a Wasserstein equity bound.
"""

from .conformal import CalibrationFactor, ConformalCalibrator, calibrate
from .datagen import Dataset, GeneratorConfig, generate, load_csv, save_csv
from .domain import (
    EpisodeOutcome,
    PredictionInterval,
    Region,
    RepairRecord,
    SensitiveGroup,
)
from .forest import QuantileForestRegressor, QuantilePair, load_forest, save_forest
from .metrics import avg_outage, interval_stats, wasserstein1, wd_inequity

__version__ = "0.1.0"

__all__ = [
    "CalibrationFactor",
    "ConformalCalibrator",
    "Dataset",
    "EpisodeOutcome",
    "GeneratorConfig",
    "PredictionInterval",
    "QuantileForestRegressor",
    "QuantilePair",
    "Region",
    "RepairRecord",
    "SensitiveGroup",
    "avg_outage",
    "calibrate",
    "generate",
    "interval_stats",
    "load_csv",
    "load_forest",
    "save_csv",
    "save_forest",
    "wasserstein1",
    "wd_inequity",
    "__version__",
]
