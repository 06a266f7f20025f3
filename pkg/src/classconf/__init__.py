"""Conformal prediction with class-adaptive conformal training.

Submodules
----------
model        small MLP classifier, losses and SGD
scores       non-conformity scores and soft set sizes
smoothsort   conformal quantiles, hard and relaxed
calibration  split, label- and cluster-conditional thresholds
objectives   CE, focal, ConfTr, CUT and class-adaptive training losses
alm          penalty functions and multiplier schedules
data         synthetic long-tailed data, CSV I/O, split protocol
metrics      coverage, set size, coverage gap, top-k accuracy
estimators   scikit-learn style front ends
"""

from .calibration import ConformalThresholds, calibrate, predict_sets
from .estimators import ConformalClassifier, ConformalTrainer
from .metrics import EvalReport, evaluate

__version__ = "0.1.0"

__all__ = ["ConformalClassifier", "ConformalThresholds", "ConformalTrainer", "EvalReport",
           "calibrate", "evaluate", "predict_sets"]
