"""Desk-scale mammogram classification bench.

Everything runs on a small reverse-mode autodiff engine over float32 numpy
arrays: four feature-enhancement transforms, a synthetic lesion generator,
seven toy classifier architectures, gradient-based attribution methods, and
a tiered weighted-voting ensemble, all wired together behind one CLI.
"""

__version__ = "0.1.0"
