"""fedroam: federated vs. centralized training of a blocked/free navigation
classifier over procedurally generated heterogeneous environments.

Subpackages map to the pipeline stages: ``nn`` (tensor engine and model
format), ``data`` (environment generators and dataset persistence), ``fl``
(the two training regimes), ``netproto`` (distributed synchronous rounds over
TCP), ``evaluation`` (accuracy/ROC/AUC grids and the sim-to-real series), and
``cli`` (the ``fedroam`` command).
"""

__version__ = "0.1.0"
