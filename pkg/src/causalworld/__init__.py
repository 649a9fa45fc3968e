"""Causal world models for factorized MDPs.

Discover the bipartite causal graph of an environment from transition data,
fit attention-based structural equations whose influence weights expose
per-action dependence, explain actions through time-unrolled causal chains,
and reuse the same model for model-based policy optimization.
"""

__version__ = "0.1.0"
