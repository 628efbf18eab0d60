"""Fold a trained network into binary weights plus integer thresholds.

A hidden neuron's batch-normalized pre-activation is non-negative exactly
when its raw +/-1 accumulation z satisfies z >= mu - beta * sqrt(sigma2 +
eps) (scale fixed at 1). Taking the ceiling of that bound gives the integer
threshold T with (z >= T) <=> (BN(z) >= 0) for every integer z, so the
hardware's comparator reproduces the sign of the normalized value exactly.
Thresholds saturate into the 11-bit signed range [-1024, 1023]; wraparound
would silently flip the activation polarity, saturation cannot.

The output layer keeps raw accumulations (no thresholds); classification
runs argmax over them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bitcore import BitMatrix, pack_bits
from .trainer import BNStats, TrainableNetwork

THRESHOLD_BITS = 11
THRESHOLD_MIN = -(1 << (THRESHOLD_BITS - 1))  # -1024
THRESHOLD_MAX = (1 << (THRESHOLD_BITS - 1)) - 1  # 1023


@dataclass(frozen=True)
class FoldedLayer:
    """Binary weights (outputs x inputs, one row per neuron) and, for hidden
    layers, one 11-bit signed threshold per neuron."""

    weights: BitMatrix
    thresholds: np.ndarray | None  # int64, None for the output layer

    def __post_init__(self):
        if self.thresholds is not None:
            t = np.asarray(self.thresholds, dtype=np.int64)
            if t.shape != (self.weights.rows,):
                raise ValueError(
                    f"threshold count {t.shape} does not match {self.weights.rows} neurons"
                )
            if t.min() < THRESHOLD_MIN or t.max() > THRESHOLD_MAX:
                raise ValueError(
                    f"thresholds outside [{THRESHOLD_MIN}, {THRESHOLD_MAX}]"
                )
            t.setflags(write=False)
            object.__setattr__(self, "thresholds", t)

    @property
    def out_features(self) -> int:
        return self.weights.rows

    @property
    def in_features(self) -> int:
        return self.weights.cols


@dataclass(frozen=True)
class FoldedModel:
    """Layer stack ready for integer inference; only the last layer lacks
    thresholds."""

    layers: tuple

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("FoldedModel needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_features != nxt.in_features:
                raise ValueError(
                    f"layer dimensions do not chain: {prev.out_features} -> {nxt.in_features}"
                )
        for layer in layers[:-1]:
            if layer.thresholds is None:
                raise ValueError("every hidden layer needs thresholds")
        if layers[-1].thresholds is not None:
            raise ValueError("the output layer must not have thresholds")
        object.__setattr__(self, "layers", layers)

    @property
    def dims(self) -> tuple:
        return (self.layers[0].in_features,) + tuple(l.out_features for l in self.layers)


def fold_threshold(mu: float, beta: float, sigma2: float, eps: float) -> int:
    """Integer threshold for one neuron: ceil(mu - beta * sqrt(sigma2 + eps)),
    saturated to the 11-bit signed range."""
    for name, v in (("mu", mu), ("beta", beta), ("sigma2", sigma2), ("eps", eps)):
        if not math.isfinite(v):
            raise ValueError(f"non-finite batch-norm statistic {name}={v!r}")
    if sigma2 < 0 or eps <= 0:
        raise ValueError("need sigma2 >= 0 and eps > 0")
    t_real = mu - beta * math.sqrt(sigma2 + eps)
    t = math.ceil(t_real)
    return int(min(max(t, THRESHOLD_MIN), THRESHOLD_MAX))


def fold_thresholds(bn: BNStats) -> tuple[np.ndarray, int]:
    """Vectorized fold of a whole layer; returns (thresholds, clamped_count)."""
    if not (np.isfinite(bn.mu).all() and np.isfinite(bn.sigma2).all() and np.isfinite(bn.beta).all()):
        raise ValueError("non-finite batch-norm statistics")
    t_real = bn.mu - bn.beta * np.sqrt(bn.sigma2 + bn.eps)
    t = np.ceil(t_real).astype(np.int64)
    clamped = int(((t < THRESHOLD_MIN) | (t > THRESHOLD_MAX)).sum())
    return np.clip(t, THRESHOLD_MIN, THRESHOLD_MAX), clamped


def binarize_weights(latent: np.ndarray) -> BitMatrix:
    """Sign-binarize a latent weight matrix; bit (j, i) = 1 iff latent[j, i] >= 0.

    Rows stay indexed by output neuron, the transposed ROM-row layout.
    """
    latent = np.asarray(latent, dtype=np.float64)
    if latent.ndim != 2:
        raise ValueError("latent weights must be 2-D (outputs x inputs)")
    if not np.isfinite(latent).all():
        raise ValueError("latent weights must be finite")
    bits = (latent >= 0.0).astype(np.uint8)
    return BitMatrix(bits.shape[0], bits.shape[1], pack_bits(bits))


def fold_model(net: TrainableNetwork, on_clamp=None) -> FoldedModel:
    """Fold every layer of a trained network.

    Hidden layers get binarized weights plus thresholds from their running
    batch-norm statistics; the output layer gets binarized weights only.
    `on_clamp(layer_index, count)` is invoked if any threshold saturated
    (not expected for healthy training runs; callers may warn or raise).
    """
    layers = []
    for i, layer in enumerate(net.layers):
        weights = binarize_weights(layer.latent)
        if layer.kind == "hidden":
            thresholds, clamped = fold_thresholds(layer.bn)
            if clamped and on_clamp is not None:
                on_clamp(i, clamped)
            layers.append(FoldedLayer(weights, thresholds))
        else:
            layers.append(FoldedLayer(weights, None))
    return FoldedModel(tuple(layers))
