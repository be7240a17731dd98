"""M3FAS echo-face toolkit: probe signals, echo extraction, two-branch fusion network."""

__version__ = "0.1.0"
