"""Sandboxed code-execution supervisor and multi-turn rollout harness."""

__version__ = "0.1.0"
