"""Anchor-guided Gaussian-mixture navigation policies.

Behavior-cloning pretraining, residual-adapter PPO fine-tuning, a 2D urban
navigation simulator, and a closed-loop evaluation harness, all on a small
float64 numpy autodiff core.
"""

__version__ = "0.1.0"
