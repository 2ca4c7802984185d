"""floodloop: deterministic agent-based urban flood dispatch simulation
with retrieval-grounded, entropy-constrained strategy generation and a
deviation-triggered replanning loop."""

__version__ = "0.1.0"
