"""Shared exception base for the package.

Every operational failure raised by this package derives from
:class:`SorryForgeError` so callers (notably the CLI) can map the whole
family to a single exit code.
"""

from __future__ import annotations

__all__ = ["SorryForgeError"]


class SorryForgeError(Exception):
    """Base class for all errors raised by sorryforge."""
