"""Parameter-efficient masking networks at desk scale."""

__version__ = "0.1.0"
