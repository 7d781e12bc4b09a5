"""Next-event prediction for entity event logs with intensity RNNs and point-process baselines."""

__version__ = "0.1.0"
