"""Holistic test descriptions coupled to a deterministic co-simulation master."""
from __future__ import annotations

__version__ = "0.1.0"
