"""Coherent hierarchical probabilistic forecasting.

An LSTM encoder feeds a partially input-convex network whose gradient in the
quantile level is a crossing-free quantile map. Scenarios sampled from it are
reconciled by a differentiable weighted projection onto the coherent,
nonnegative subspace.
"""

__version__ = "0.1.0"
