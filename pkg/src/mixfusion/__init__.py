"""Robust planar localization with self-tuning Gaussian-mixture error models.

Subpackages:

* ``mixture``: Gaussian mixtures, EM fitting, information criteria.
* ``robust``: Gaussian / max-mixture / sum-mixture / DCS residual transforms.
* ``solver``: dense block least squares with Levenberg-Marquardt damping.
* ``graph``: sliding-window factor graph estimator (nested EM).
* ``data``: dataset text format and synthetic NLOS scenario generator.
* ``metrics``: trajectory error and histogram evaluation.
* ``cli``: the ``mixfusion`` command-line experiment runner.
"""

from . import data, graph, metrics, mixture, robust, solver

__all__ = ["data", "graph", "metrics", "mixture", "robust", "solver"]
__version__ = "0.1.0"
