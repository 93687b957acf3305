"""Probabilistic Lidar vehicle detection on synthetic scenes.

Simulated scans are encoded as bird's-eye-view grids, pooled over anchor
proposals and fed to a small dropout MLP whose MC-dropout spread and learned
log-variance head give epistemic and aleatoric uncertainty estimates.
"""

__version__ = "0.1.0"
