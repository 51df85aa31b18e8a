"""Rollout and partitioned approximate policy iteration for POMDP pipeline repair."""

__version__ = "0.1.0"
