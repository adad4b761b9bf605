"""Multi-robot contamination-monitoring simulator with federated learning
over a BB84-keyed channel and ChaCha20 telemetry."""

__version__ = "0.1.0"
