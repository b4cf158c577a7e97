"""racnet: relevant-feature auxiliary cells for error detection and early exit in CNNs."""

__version__ = "0.1.0"
