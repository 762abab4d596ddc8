"""Prune long chain-of-thought traces to short on-policy-valid prefixes."""

__version__ = "0.1.0"
