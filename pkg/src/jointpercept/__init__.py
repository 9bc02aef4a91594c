"""Desk-scale unified perception: one shared encoder, every task as input/target matching."""

__version__ = "0.1.0"
