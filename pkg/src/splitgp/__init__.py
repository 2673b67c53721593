"""SplitGP simulator: two-exit split/federated training, entropy-routed inference, latency model."""

__version__ = "0.1.0"
