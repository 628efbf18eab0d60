"""Bit-exact read/write of the `.mem` memory-initialization text format.

Three kinds of files, all ASCII '0'/'1' lines terminated by a single LF:

  weights     one line per neuron; character k (left to right) is the weight
              bit for input index k
  thresholds  one line per neuron; 11-character two's-complement binary,
              most significant bit first
  image       a single 784-character line; character k is pixel bit k,
              row-major

Writers are deterministic (identical input -> byte-identical file) and the
readers are strict: any byte sequence a writer cannot produce is rejected,
with the line and column of the first offense. No CR, no blank lines, no
missing trailing newline, no width drift.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .bitcore import BitMatrix, BitVector
from .folding import THRESHOLD_BITS, THRESHOLD_MAX, THRESHOLD_MIN, FoldedLayer

IMAGE_BITS = 784


class MemFormatError(ValueError):
    """Malformed .mem file; carries 1-based line (and column when known)."""

    def __init__(self, path, message: str, line: int | None = None, col: int | None = None):
        where = ""
        if line is not None:
            where = f" at line {line}" + (f", column {col}" if col is not None else "")
        super().__init__(f"{path}: {message}{where}")
        self.path = str(path)
        self.line = line
        self.col = col


def _bits_to_line(bits: np.ndarray) -> str:
    return "".join("1" if b else "0" for b in bits)


def _parse_lines(path) -> list[str]:
    raw = Path(path).read_bytes()
    if not raw:
        raise MemFormatError(path, "empty file")
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError as e:
        raise MemFormatError(path, f"non-ASCII byte {raw[e.start]:#04x}") from None
    if "\r" in text:
        line = text[: text.index("\r")].count("\n") + 1
        raise MemFormatError(path, "carriage return not allowed", line=line)
    if not text.endswith("\n"):
        raise MemFormatError(path, "missing trailing newline", line=text.count("\n") + 1)
    lines = text[:-1].split("\n")
    width = len(lines[0])
    for i, line in enumerate(lines, start=1):
        if len(line) != width:
            raise MemFormatError(
                path, f"line width {len(line)} differs from {width}", line=i
            )
        if width == 0:
            raise MemFormatError(path, "blank line", line=i)
        for j, ch in enumerate(line, start=1):
            if ch not in "01":
                raise MemFormatError(path, f"illegal character {ch!r}", line=i, col=j)
    return lines


def write_weights(layer, path):
    """Write a weight matrix: line j is neuron j's row, input index 0 first."""
    matrix = layer.weights if isinstance(layer, FoldedLayer) else layer
    with open(path, "w", newline="\n") as f:
        for j in range(matrix.rows):
            f.write(_bits_to_line(matrix.row(j).to_bits()))
            f.write("\n")


def read_weights(path) -> BitMatrix:
    lines = _parse_lines(path)
    bits = np.array([[1 if c == "1" else 0 for c in line] for line in lines], dtype=np.uint8)
    return BitMatrix.from_bit_array(bits)


def encode_threshold(value: int) -> str:
    """11-bit two's-complement string, MSB first."""
    if not THRESHOLD_MIN <= value <= THRESHOLD_MAX:
        raise ValueError(f"threshold {value} outside [{THRESHOLD_MIN}, {THRESHOLD_MAX}]")
    return format(int(value) & ((1 << THRESHOLD_BITS) - 1), f"0{THRESHOLD_BITS}b")


def decode_threshold(line: str) -> int:
    raw = int(line, 2)
    if raw >= 1 << (THRESHOLD_BITS - 1):
        raw -= 1 << THRESHOLD_BITS
    return raw


def write_thresholds(thresholds, path):
    """One line per neuron, 11-character two's complement, MSB first."""
    values = np.asarray(thresholds, dtype=np.int64)
    encoded = []
    for j, t in enumerate(values):
        if not THRESHOLD_MIN <= t <= THRESHOLD_MAX:
            raise ValueError(
                f"threshold for neuron {j} is {t}, outside [{THRESHOLD_MIN}, {THRESHOLD_MAX}]"
            )
        encoded.append(encode_threshold(int(t)))
    with open(path, "w", newline="\n") as f:
        for line in encoded:
            f.write(line)
            f.write("\n")


def read_thresholds(path) -> np.ndarray:
    lines = _parse_lines(path)
    if len(lines[0]) != THRESHOLD_BITS:
        raise MemFormatError(
            path, f"threshold width {len(lines[0])}, expected {THRESHOLD_BITS}", line=1
        )
    return np.array([decode_threshold(line) for line in lines], dtype=np.int64)


def write_image(bits: BitVector, path):
    """Single 784-character line; character k is pixel bit k, row-major."""
    if bits.length != IMAGE_BITS:
        raise ValueError(f"image must be {IMAGE_BITS} bits, got {bits.length}")
    with open(path, "w", newline="\n") as f:
        f.write(_bits_to_line(bits.to_bits()))
        f.write("\n")


def read_image(path) -> BitVector:
    lines = _parse_lines(path)
    if len(lines) != 1:
        raise MemFormatError(path, f"expected one line, found {len(lines)}", line=2)
    if len(lines[0]) != IMAGE_BITS:
        raise MemFormatError(
            path, f"image width {len(lines[0])}, expected {IMAGE_BITS}", line=1
        )
    return BitVector.from_bits(np.array([1 if c == "1" else 0 for c in lines[0]], np.uint8))


# -- folded model directories -------------------------------------------------
# manifest.txt names the layer dimensions; layer k (1-based) stores its
# weights in weights_l<k>.mem and, for hidden layers, thresholds in
# thresholds_l<k>.mem.

FOLDED_MANIFEST = "manifest.txt"


def weights_name(k: int) -> str:
    return f"weights_l{k}.mem"


def thresholds_name(k: int) -> str:
    return f"thresholds_l{k}.mem"


def save_folded(model, directory):
    from .folding import FoldedModel  # local import keeps module load light

    assert isinstance(model, FoldedModel)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dims = ",".join(str(d) for d in model.dims)
    (directory / FOLDED_MANIFEST).write_text(
        f"format = folded-1\ndims = {dims}\nlayers = {len(model.layers)}\n"
    )
    for k, layer in enumerate(model.layers, start=1):
        write_weights(layer, directory / weights_name(k))
        if layer.thresholds is not None:
            write_thresholds(layer.thresholds, directory / thresholds_name(k))


def load_folded(directory):
    from .folding import FoldedLayer, FoldedModel

    directory = Path(directory)
    manifest_path = directory / FOLDED_MANIFEST
    if not manifest_path.exists():
        raise FileNotFoundError(f"{manifest_path} not found")
    manifest = {}
    for line in manifest_path.read_text().splitlines():
        key, _, value = line.partition("=")
        manifest[key.strip()] = value.strip()
    dims = tuple(int(d) for d in manifest["dims"].split(","))
    n_layers = int(manifest["layers"])
    layers = []
    for k in range(1, n_layers + 1):
        weights = read_weights(directory / weights_name(k))
        expected = (dims[k], dims[k - 1])
        if (weights.rows, weights.cols) != expected:
            raise MemFormatError(
                directory / weights_name(k),
                f"weight shape {weights.rows}x{weights.cols} does not match "
                f"manifest dims {expected[0]}x{expected[1]}",
            )
        if k < n_layers:
            thresholds = read_thresholds(directory / thresholds_name(k))
            if thresholds.size != weights.rows:
                raise MemFormatError(
                    directory / thresholds_name(k),
                    f"{thresholds.size} thresholds for {weights.rows} neurons",
                )
            layers.append(FoldedLayer(weights, thresholds))
        else:
            layers.append(FoldedLayer(weights, None))
    return FoldedModel(tuple(layers))
