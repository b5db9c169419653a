"""Graph-token language model, vocabulary and reconstruction heads."""

from __future__ import annotations

__all__: list[str] = []
