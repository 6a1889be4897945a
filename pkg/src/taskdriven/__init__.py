"""Task-driven policy learning: MINE-regularized policy gradients for robust control."""

__version__ = "0.1.0"
