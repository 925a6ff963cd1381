"""Isolated executor and parser for untrusted candidate programs.

Run as a subprocess (``python -m sandbox_worker``) and speak newline-delimited
JSON over stdin/stdout. See ``sandbox_worker.__main__`` for the protocol.

This package is deliberately self-contained: it must never import from the
engine that drives it, so the stdio protocol stays the only coupling point.
"""
