"""Language-guided UAV navigation stack with a deterministic synthetic benchmark."""

__version__ = "0.1.0"
