"""Offline tree search over tool-use tasks, distilled into de-lexicalized State-Goal-Action atoms
that an online executor retrieves as hints."""
from __future__ import annotations

__version__ = "0.1.0"
