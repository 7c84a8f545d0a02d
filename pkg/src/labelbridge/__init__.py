"""Label-count recovery from a single restricted gradient in simulated FedSGD."""

__version__ = "0.1.0"
