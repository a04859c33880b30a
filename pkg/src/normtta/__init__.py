"""Streaming test-time adaptation of batch-norm layers in a causal TCN.

Submodules: backbone, adapt, augment, shiftgen, data, evalstat, experiment, cli.
"""
__version__ = "0.1.0"
