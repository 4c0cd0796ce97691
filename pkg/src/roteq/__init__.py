"""Rotation-equivariant convolution kit.

Quarter-turn equivariant CNN layers implemented by expanding rotated
filter copies over tied base parameters, with an independent
feature-map-rotating reference path, a from-scratch training loop for
rotated-digit style data, an analytic memory-cost model, and a
wall-clock benchmark of the two strategies.
"""

from . import bench, cli, conv, data, eqlayers, network, oracle, tensor

__all__ = ["bench", "cli", "conv", "data", "eqlayers", "network", "oracle", "tensor"]
__version__ = "0.1.0"
