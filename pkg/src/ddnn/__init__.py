"""Distributed deep neural networks over simulated end devices and a cloud.

A jointly trained multi-exit network whose first layers run on each end
device with binary weights, a local aggregator that can answer early when it
is confident, and a cloud stack that handles everything else.
"""

__version__ = "0.1.0"
