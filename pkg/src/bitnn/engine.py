"""Bit-exact integer inference over a folded model.

The software twin of the hardware datapath: per hidden layer, each neuron's
raw accumulation z = 2 * popcount(XNOR(x, w)) - n is compared against its
integer threshold to produce the next activation bit; the output layer
keeps its raw sums and argmax picks the class, ties resolved toward the
lowest index (the hardware's sequential scan only replaces the running
maximum on strictly greater).

Three implementations of the same semantics live here:

  infer                 word-parallel packed kernels (the fast path)
  infer_float_reference +/-1 floating-point arithmetic with real-valued
                        threshold comparisons; exists solely as the
                        differential oracle for infer
  infer_bitserial       per-bit Python loops, one XNOR at a time; the
                        slow reference the packed path is benchmarked
                        against
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bitcore import (
    BitVector,
    DimensionError,
    matmat_popcount,
    matvec_popcount,
    pack_bits,
)
from .folding import FoldedModel
from .mnist_data import Dataset, binarize_image


@dataclass(frozen=True)
class InferenceResult:
    logits: np.ndarray  # 10 signed integers, raw output-layer sums
    predicted: int  # argmax, ties toward the lowest index

    def __post_init__(self):
        self.logits.setflags(write=False)


def _check_input(model: FoldedModel, x: BitVector):
    if x.length != model.layers[0].in_features:
        raise DimensionError(model.layers[0].in_features, x.length)


def infer(model: FoldedModel, x: BitVector, collect_trace: bool = False):
    """Run packed integer inference on one input.

    With collect_trace=True returns (result, trace) where trace holds each
    hidden layer's activation BitVector (used by co-simulation mismatch
    reporting).
    """
    _check_input(model, x)
    trace = []
    a = x
    for layer in model.layers:
        n = layer.in_features
        m = matvec_popcount(layer.weights, a)
        z = 2 * m - n
        if layer.thresholds is not None:
            bits = (z >= layer.thresholds).astype(np.uint8)
            a = BitVector(bits.size, pack_bits(bits))
            trace.append(a)
        else:
            logits = z
    result = InferenceResult(logits, int(np.argmax(logits)))
    return (result, trace) if collect_trace else result


def infer_float_reference(model: FoldedModel, x: BitVector) -> np.ndarray:
    """Differential oracle: every layer in +/-1 float arithmetic.

    Activations and weights are -1.0/+1.0 floats, accumulation is a float
    dot product, and hidden activations come from comparing against the
    threshold as a real number. Returns the float logits.
    """
    _check_input(model, x)
    a = x.to_signs().astype(np.float64)
    for layer in model.layers:
        w = layer.weights.to_sign_array().astype(np.float64)
        z = w @ a
        if layer.thresholds is not None:
            a = np.where(z >= layer.thresholds.astype(np.float64), 1.0, -1.0)
        else:
            return z
    raise AssertionError("unreachable: folded model always ends in an output layer")


def infer_bitserial(model: FoldedModel, x: BitVector) -> InferenceResult:
    """Pure per-bit loop implementation: one XNOR per step, no packing."""
    _check_input(model, x)
    activations = [x.get_bit(i) for i in range(x.length)]
    logits = None
    for layer in model.layers:
        n = layer.in_features
        next_activations = []
        sums = []
        for j in range(layer.out_features):
            row = layer.weights.row(j)
            popcount = 0
            for i in range(n):
                if activations[i] == row.get_bit(i):
                    popcount += 1
            z = 2 * popcount - n
            if layer.thresholds is not None:
                next_activations.append(1 if z >= layer.thresholds[j] else 0)
            else:
                sums.append(z)
        if layer.thresholds is not None:
            activations = next_activations
        else:
            logits = np.array(sums, dtype=np.int64)
    best = 0
    for j in range(1, logits.size):
        if logits[j] > logits[best]:  # strictly greater, ties keep the low index
            best = j
    return InferenceResult(logits, best)


def infer_batch(model: FoldedModel, packed: np.ndarray, length: int):
    """Packed inference over many inputs at once.

    `packed` is an (n_samples, n_words) uint64 array with zeroed padding
    bits. Returns (logits (n, 10) int64, predicted (n,) int64).
    """
    a = packed
    n_in = length
    for layer in model.layers:
        m = matmat_popcount(layer.weights, a, n_in)
        z = 2 * m - n_in
        if layer.thresholds is not None:
            bits = (z >= layer.thresholds[None, :]).astype(np.uint8)
            a = pack_bits(bits)
            n_in = bits.shape[1]
        else:
            logits = z
    return logits, np.argmax(logits, axis=1)


def pack_dataset(dataset: Dataset) -> np.ndarray:
    """Binarize and pack every image of a dataset into (n, words) uint64."""
    flat = dataset.images.reshape(len(dataset), -1)
    return pack_bits((flat >= 128).astype(np.uint8))


@dataclass(frozen=True)
class ClassifyReport:
    accuracy: float
    correct: int
    total: int
    confusion: np.ndarray  # (10, 10); rows true label, columns prediction
    per_class_correct: np.ndarray
    per_class_total: np.ndarray


def classify_dataset(model: FoldedModel, dataset: Dataset) -> ClassifyReport:
    """Integer inference over a whole dataset with a confusion matrix."""
    if len(dataset) == 0:
        raise ValueError("cannot classify an empty dataset")
    packed = pack_dataset(dataset)
    _, pred = infer_batch(model, packed, model.layers[0].in_features)
    labels = dataset.labels.astype(np.int64)
    confusion = np.zeros((10, 10), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    correct = int((pred == labels).sum())
    return ClassifyReport(
        accuracy=correct / len(dataset),
        correct=correct,
        total=len(dataset),
        confusion=confusion,
        per_class_correct=np.diag(confusion).copy(),
        per_class_total=np.bincount(labels, minlength=10),
    )


def infer_image(model: FoldedModel, image: np.ndarray) -> InferenceResult:
    """Convenience: binarize a raw 28x28 u8 image and classify it."""
    return infer(model, binarize_image(image))
