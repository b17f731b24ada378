"""Numerically stable higher-order influence function estimators."""

from __future__ import annotations

__version__ = "0.1.0"
