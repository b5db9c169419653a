"""Exact entropy / mutual-information oracle."""

from __future__ import annotations

__all__: list[str] = []
