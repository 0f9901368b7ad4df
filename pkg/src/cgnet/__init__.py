"""Channel-gated CNN engine: per-activation dynamic pruning at desk scale."""

__version__ = "0.1.0"
