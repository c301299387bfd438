"""Strategic-group analytics: ensemble regression, additive prediction
decomposition, cluster-based group identification, and group statistics."""

__version__ = "0.1.0"
