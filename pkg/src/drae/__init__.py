"""Dynamic retrieval-augmented expert networks.

Sparse mixture-of-experts with retrieval-aware gating, Dirichlet-process
task clustering driving expert expansion, a three-layer control stack,
and a synthetic-stream harness measuring regret, forgetting, stability,
and sample-complexity scaling.
"""

__version__ = "0.1.0"
