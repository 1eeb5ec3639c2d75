"""HTTP service wrapping a protocol server."""

from .app import create_app

__all__ = ["create_app"]
