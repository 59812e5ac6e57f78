"""Layer-wise partial federated learning at desk scale.

The main entry points are :func:`playerfl.protocol.run_algorithm` for the
training protocols, :mod:`playerfl.diagnostics` for layer metrics, the
:class:`FederatedClassifier` estimator, and the ``playerfl`` command line tool.
"""

from .estimators import FederatedClassifier, NetworkClassifier
from .protocol import ALGORITHMS, AlgorithmConfig, FederationPlan, run_algorithm

__version__ = "0.1.0"

__all__ = [
    "ALGORITHMS",
    "AlgorithmConfig",
    "FederatedClassifier",
    "FederationPlan",
    "NetworkClassifier",
    "run_algorithm",
]
