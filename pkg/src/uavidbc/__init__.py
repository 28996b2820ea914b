"""Identity management for clustered UAV networks backed by a
head-maintained blockchain, with a deterministic simulator."""

__version__ = "0.1.0"
