"""Training loop, evaluation and experiment suites."""

from __future__ import annotations

__all__: list[str] = []
