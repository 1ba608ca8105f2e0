"""Blockchain-anchored certificates whose validity is maintained by periodic
CA key validations and checked offline by light clients."""

__version__ = "0.1.0"
