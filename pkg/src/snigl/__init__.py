"""Invariant-subgraph learning guided by necessity/sufficiency bounds.

Layout:

* :mod:`snigl.causation` -- bounds, flip-rate calibration, predictor
  combination (pure probability algebra).
* :mod:`snigl.scm` -- exact enumeration oracles on finite structural
  causal models and joint tables.
* :mod:`snigl.data` -- biased-motif synthetic graphs, environment splits,
  and the line-delimited dataset format.
* :mod:`snigl.autodiff` -- the reverse-mode tape the model is built on.
* :mod:`snigl.model` -- message-passing encoders, edge-probability masks,
  relaxed subgraph sampling, classifier heads.
* :mod:`snigl.training` -- the four risk terms and the optimization loop.
* :mod:`snigl.adaptation` -- label-free test-domain head fitting,
  calibration, and ensembling.
* :mod:`snigl.cli` -- the ``snigl`` command.
"""

from .causation import (
    CalibrationStats,
    PnsBound,
    calibrate_binary,
    calibrate_multiclass,
    combine_binary,
    combine_multiclass,
    estimate_confusion_multiclass,
    estimate_flip_rates_binary,
    pns_lower_bound,
)
from .scm import (
    DiscreteSCM,
    JointTable,
    Mechanism,
    enumerate_joint,
    exact_pns,
    exact_posterior,
    joint_from_class_conditionals,
    simulate_pseudo_labels,
)

__version__ = "0.1.0"

__all__ = [
    "CalibrationStats",
    "PnsBound",
    "calibrate_binary",
    "calibrate_multiclass",
    "combine_binary",
    "combine_multiclass",
    "estimate_confusion_multiclass",
    "estimate_flip_rates_binary",
    "pns_lower_bound",
    "DiscreteSCM",
    "JointTable",
    "Mechanism",
    "enumerate_joint",
    "exact_pns",
    "exact_posterior",
    "joint_from_class_conditionals",
    "simulate_pseudo_labels",
    "__version__",
]
