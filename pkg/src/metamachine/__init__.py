"""Morphology and control co-design toolkit for modular legged metamachines."""

from __future__ import annotations

__version__ = "0.1.0"
