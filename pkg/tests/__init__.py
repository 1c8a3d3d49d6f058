"""Tests package for cerebellar-dqn."""
