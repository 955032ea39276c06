"""Graph federated learning simulator with a feature-manipulating client and a link-reconstruction attack."""

__version__ = "0.1.0"
