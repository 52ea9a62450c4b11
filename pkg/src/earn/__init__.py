"""Register tokens with early prompt pruning for fast generative recommendation.

A small numpy transformer whose prompt tokens are dropped after layer k,
with the KV cache, training loop, cost model, analysis and benchmark tools
around it.
"""

__version__ = "0.1.0"
