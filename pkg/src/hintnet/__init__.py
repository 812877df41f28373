"""Hierarchical traffic-accident forecasting on a spatio-temporal grid.

Cells are grouped into risk levels by multi-level density-based partitioning;
each level gets its own graph-convolution + LSTM predictor, trained urban
level first with warm starts passed down the hierarchy.
"""

from .grid import FeatureSet, GridSpec
from .model import HyperParams, ModelParams
from .partition import MRSPParams, aggregate_levels, m_rsp
from .transfer import ModelPool, cross_level_train, predict_grid

__version__ = "0.1.0"

__all__ = [
    "FeatureSet",
    "GridSpec",
    "HyperParams",
    "ModelParams",
    "MRSPParams",
    "ModelPool",
    "aggregate_levels",
    "cross_level_train",
    "m_rsp",
    "predict_grid",
]
