"""relaxkit: quantitative T1/T2 mapping from weighted MR image series.

Three interchangeable estimators (regularized maximum likelihood, a recurrent
inference network, and a ResNet baseline) plus the synthetic-data generator and
Monte Carlo evaluation harness needed to train and compare them.
"""

__version__ = "0.1.0"

from .containers import (
    AcquisitionProtocol,
    ParameterMap,
    SequenceKind,
    TissueLabelMap,
    WeightedSeries,
    load_container,
    save_container,
)
from .rng import SeededRng

__all__ = [
    "AcquisitionProtocol",
    "ParameterMap",
    "SequenceKind",
    "TissueLabelMap",
    "WeightedSeries",
    "load_container",
    "save_container",
    "SeededRng",
    "__version__",
]
