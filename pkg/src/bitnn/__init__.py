"""Binarized MLP toolkit.

Trains a 784-128-64-10 binary MLP with quantization-aware training, folds
batch normalization into integer thresholds, runs bit-exact XNOR-popcount
inference, reads and writes the hardware `.mem` memory format, and simulates
the five-stage FSM accelerator cycle-accurately across parallelism levels.
"""

__version__ = "0.1.0"
