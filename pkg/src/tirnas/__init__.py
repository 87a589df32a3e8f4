"""Differentiable cell-based architecture search for thermal-infrared
pedestrian tracking: search space, bilevel search loop, joint-loss
retraining, and a tracking metric suite, all on a small numpy autodiff core.
"""

__version__ = "0.1.0"
