"""Continual 3D segmentation on synthetic partially-labeled volumes.

A frozen shared encoder feeds lightweight per-anatomy decoder heads that
are magnitude-pruned (train/prune/rewind ladder), smoothed with an EMA
shadow for continual updates, and merged through body-position bounds
with lesion-aware weighting.  Marginal-loss and pooled-feature
distillation baselines share the same engine for forgetting-curve
comparisons.
"""

from . import arch, ema, engine, losses, lth, merge, metrics, sslge, synthdata

__all__ = ["arch", "ema", "engine", "losses", "lth", "merge", "metrics",
           "sslge", "synthdata"]

__version__ = "0.1.0"
