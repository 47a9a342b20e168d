"""Binarized neural networks with an activation-distribution regularizer.

Subpackages and modules:

* ``tensor``/``ops``: a small reverse-mode autodiff engine on numpy arrays
* ``binary``: sign activations, binarized conv blocks, modules
* ``distloss``: the distribution loss and per-channel diagnostics
* ``models``: VGG-style and residual network builders
* ``train``: data, optimizers, configs, checkpoints and the training loop
* ``fused``: bit-packed XNOR/popcount inference compiled from a checkpoint
* ``cost``: operation counts and energy estimates
"""

from .errors import BNNError, ConfigError, DataError, NumericError
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = ["BNNError", "ConfigError", "DataError", "NumericError", "Tensor", "__version__"]
