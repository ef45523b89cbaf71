"""Wright-Fisher common-noise mean field games on the probability simplex."""
from __future__ import annotations

__version__ = "0.1.0"
