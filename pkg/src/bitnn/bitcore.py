"""Word-packed binary vectors/matrices and the XNOR-popcount kernels.

Encoding convention used throughout the package: bit value 1 stands for +1
and bit value 0 stands for -1. Bit i of a vector lives in word i // 64 at
bit position i % 64. All padding bits beyond the logical length are kept at
zero, so word-parallel popcounts only need to mask the final word once, at
construction time.

BitVector and BitMatrix are immutable after construction and safe to share
across threads.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

WORD_BITS = 64


class DimensionError(ValueError):
    """Raised when two bit containers of incompatible lengths are combined."""

    def __init__(self, left: int, right: int):
        super().__init__(f"length mismatch: {left} vs {right}")
        self.left = left
        self.right = right


def _num_words(length: int) -> int:
    return (length + WORD_BITS - 1) // WORD_BITS


def _tail_mask(length: int) -> np.uint64:
    """Mask selecting the valid bits of the final word."""
    used = length % WORD_BITS
    if used == 0:
        return np.uint64(0xFFFFFFFFFFFFFFFF)
    return np.uint64((1 << used) - 1)


def popcount_words(words: np.ndarray) -> int:
    """Total number of set bits across an array of uint64 words."""
    return int(np.bitwise_count(words).sum())


class BitVector:
    """An immutable packed vector of +/-1 values (1 bit each).

    Parameters
    ----------
    length : int
        Number of logical bits, >= 1.
    words : np.ndarray
        uint64 array of ceil(length / 64) words. Padding bits beyond
        `length` must be zero.
    """

    __slots__ = ("length", "words")

    def __init__(self, length: int, words: np.ndarray):
        if length < 1:
            raise ValueError(f"BitVector length must be >= 1, got {length}")
        words = np.ascontiguousarray(words, dtype=np.uint64)
        if words.shape != (_num_words(length),):
            raise ValueError(
                f"expected {_num_words(length)} words for length {length}, "
                f"got shape {words.shape}"
            )
        if words[-1] & ~_tail_mask(length):
            raise ValueError("padding bits beyond the logical length must be zero")
        words.setflags(write=False)
        object.__setattr__(self, "length", length)
        object.__setattr__(self, "words", words)

    def __setattr__(self, name, value):
        raise AttributeError("BitVector is immutable")

    @classmethod
    def from_bits(cls, bits: Iterable[int]) -> "BitVector":
        """Build from an iterable of 0/1 bit values (index 0 first)."""
        arr = np.asarray(list(bits) if not isinstance(bits, np.ndarray) else bits)
        arr = arr.astype(np.uint8)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("from_bits expects a non-empty 1-D sequence")
        if np.any(arr > 1):
            raise ValueError("bit values must be 0 or 1")
        return cls(arr.size, pack_bits(arr))

    @classmethod
    def zeros(cls, length: int) -> "BitVector":
        """All -1 vector (every bit 0)."""
        return cls(length, np.zeros(_num_words(length), dtype=np.uint64))

    @classmethod
    def ones(cls, length: int) -> "BitVector":
        """All +1 vector (every bit 1)."""
        words = np.full(_num_words(length), 0xFFFFFFFFFFFFFFFF, dtype=np.uint64)
        words[-1] &= _tail_mask(length)
        return cls(length, words)

    def get_bit(self, i: int) -> int:
        if not 0 <= i < self.length:
            raise IndexError(f"bit index {i} out of range for length {self.length}")
        return int((self.words[i // WORD_BITS] >> np.uint64(i % WORD_BITS)) & np.uint64(1))

    def to_bits(self) -> np.ndarray:
        """Unpacked uint8 array of 0/1 values, index 0 first."""
        return unpack_bits(self.words, self.length)

    def to_signs(self) -> np.ndarray:
        """Unpacked int8 array of -1/+1 values (bit 1 -> +1)."""
        return (self.to_bits().astype(np.int8) * 2 - 1).astype(np.int8)

    def complement(self) -> "BitVector":
        """Flip every logical bit; padding stays zero."""
        words = ~self.words
        words = words.copy()
        words[-1] &= _tail_mask(self.length)
        return BitVector(self.length, words)

    def popcount(self) -> int:
        """Number of +1 entries."""
        return popcount_words(self.words)

    def __len__(self) -> int:
        return self.length

    def __eq__(self, other) -> bool:
        if not isinstance(other, BitVector):
            return NotImplemented
        return self.length == other.length and bool(np.array_equal(self.words, other.words))

    def __hash__(self):
        return hash((self.length, self.words.tobytes()))

    def __repr__(self) -> str:
        if self.length <= 32:
            bits = "".join(str(b) for b in self.to_bits())
            return f"BitVector({self.length}, bits={bits})"
        return f"BitVector({self.length})"


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a 1-D (or 2-D, row-wise) array of 0/1 values into uint64 words.

    Bit i of a row goes to word i // 64, position i % 64.
    """
    bits = np.asarray(bits, dtype=np.uint8)
    single = bits.ndim == 1
    if single:
        bits = bits[None, :]
    n = bits.shape[1]
    nw = _num_words(n)
    padded = np.zeros((bits.shape[0], nw * WORD_BITS), dtype=np.uint8)
    padded[:, :n] = bits
    # np.packbits is MSB-first within each byte; our layout is LSB-first.
    packed = np.packbits(padded, axis=1, bitorder="little")
    words = packed.view("<u8").astype(np.uint64)
    return words[0] if single else words


def unpack_bits(words: np.ndarray, length: int) -> np.ndarray:
    """Inverse of pack_bits for a single row of words."""
    little = np.asarray(words, dtype="<u8")
    as_bytes = little.view(np.uint8)
    bits = np.unpackbits(as_bytes, bitorder="little")
    return bits[:length]


class BitMatrix:
    """An immutable stack of equal-length BitVector rows.

    Row index j is the output-neuron index: row j holds neuron j's full set
    of input weights (the ROM-row layout the inference memories use).
    Internally the rows are one packed 2-D uint64 array so kernels can run
    over whole layers at once; `row(j)` exposes individual BitVector rows.
    """

    __slots__ = ("rows", "cols", "data")

    def __init__(self, rows: int, cols: int, data: np.ndarray):
        if rows < 1 or cols < 1:
            raise ValueError(f"BitMatrix must be at least 1x1, got {rows}x{cols}")
        data = np.ascontiguousarray(data, dtype=np.uint64)
        if data.shape != (rows, _num_words(cols)):
            raise ValueError(
                f"expected shape ({rows}, {_num_words(cols)}), got {data.shape}"
            )
        if np.any(data[:, -1] & ~_tail_mask(cols)):
            raise ValueError("padding bits beyond the logical width must be zero")
        data.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)
        object.__setattr__(self, "data", data)

    def __setattr__(self, name, value):
        raise AttributeError("BitMatrix is immutable")

    @classmethod
    def from_rows(cls, rows: Sequence[BitVector]) -> "BitMatrix":
        if len(rows) == 0:
            raise ValueError("BitMatrix needs at least one row")
        cols = rows[0].length
        for j, r in enumerate(rows):
            if r.length != cols:
                raise DimensionError(cols, r.length)
        data = np.stack([r.words for r in rows])
        return cls(len(rows), cols, data)

    @classmethod
    def from_bit_array(cls, bits: np.ndarray) -> "BitMatrix":
        """Build from a 2-D array of 0/1 values (rows = neurons)."""
        bits = np.asarray(bits, dtype=np.uint8)
        if bits.ndim != 2:
            raise ValueError("from_bit_array expects a 2-D array")
        return cls(bits.shape[0], bits.shape[1], pack_bits(bits))

    def row(self, j: int) -> BitVector:
        if not 0 <= j < self.rows:
            raise IndexError(f"row {j} out of range for {self.rows} rows")
        return BitVector(self.cols, self.data[j].copy())

    def to_bit_array(self) -> np.ndarray:
        """Unpacked (rows, cols) uint8 array of 0/1 values."""
        return np.stack([unpack_bits(self.data[j], self.cols) for j in range(self.rows)])

    def to_sign_array(self) -> np.ndarray:
        """Unpacked (rows, cols) int8 array of -1/+1 values."""
        return (self.to_bit_array().astype(np.int8) * 2 - 1).astype(np.int8)

    def __eq__(self, other) -> bool:
        if not isinstance(other, BitMatrix):
            return NotImplemented
        return (
            self.rows == other.rows
            and self.cols == other.cols
            and bool(np.array_equal(self.data, other.data))
        )

    def __hash__(self):
        return hash((self.rows, self.cols, self.data.tobytes()))

    def __repr__(self) -> str:
        return f"BitMatrix({self.rows}x{self.cols})"


def binarize_real(values) -> BitVector:
    """Binarize a real vector: bit i = 1 iff values[i] >= 0.

    Rejects non-finite elements, reporting the index of the first offender.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("binarize_real expects a non-empty 1-D vector")
    finite = np.isfinite(arr)
    if not finite.all():
        idx = int(np.argmin(finite))
        raise ValueError(f"non-finite element {arr[idx]!r} at index {idx}")
    return BitVector(arr.size, pack_bits((arr >= 0.0).astype(np.uint8)))


def xnor_popcount(x: BitVector, w: BitVector) -> int:
    """Number of positions where x and w agree, computed word-parallel.

    XNOR each word pair, mask the padding of the final word, popcount.
    """
    if x.length != w.length:
        raise DimensionError(x.length, w.length)
    agree = ~(x.words ^ w.words)
    agree = agree.copy()
    agree[-1] &= _tail_mask(x.length)
    return popcount_words(agree)


def xnor_popcount_bitserial(x: BitVector, w: BitVector) -> int:
    """Per-bit comparison loop. Slow reference twin of xnor_popcount."""
    if x.length != w.length:
        raise DimensionError(x.length, w.length)
    m = 0
    for i in range(x.length):
        if x.get_bit(i) == w.get_bit(i):
            m += 1
    return m


def binary_dot(x: BitVector, w: BitVector) -> int:
    """Signed +/-1 dot product via the match-count identity.

    With m agreeing positions out of n, each match contributes +1 and each
    mismatch -1, so the dot product is 2*m - n. The result always has the
    same parity as n and lies in [-n, n].
    """
    return 2 * xnor_popcount(x, w) - x.length


def matvec_popcount(matrix: BitMatrix, x: BitVector) -> np.ndarray:
    """Match counts of x against every row of `matrix` (word-parallel).

    Returns an int64 array of length matrix.rows; entry j equals
    xnor_popcount(x, matrix.row(j)).
    """
    if matrix.cols != x.length:
        raise DimensionError(matrix.cols, x.length)
    agree = ~(matrix.data ^ x.words[None, :])
    agree[:, -1] &= _tail_mask(x.length)
    return np.bitwise_count(agree).sum(axis=1, dtype=np.int64)


def matvec_popcount_rows(matrix: BitMatrix, x: BitVector, start: int, stop: int) -> np.ndarray:
    """Match counts of x against rows start..stop-1 only (word-parallel)."""
    if matrix.cols != x.length:
        raise DimensionError(matrix.cols, x.length)
    agree = ~(matrix.data[start:stop] ^ x.words[None, :])
    agree[:, -1] &= _tail_mask(x.length)
    return np.bitwise_count(agree).sum(axis=1, dtype=np.int64)


def matmat_popcount(matrix: BitMatrix, inputs: np.ndarray, length: int) -> np.ndarray:
    """Match counts for a batch of packed input rows against every matrix row.

    `inputs` is an (n_samples, n_words) uint64 array with zeroed padding.
    Returns an (n_samples, matrix.rows) int64 array of agreement counts.
    Iterates over matrix rows, which keeps the XOR buffers small while the
    per-row work stays fully vectorized.
    """
    if matrix.cols != length:
        raise DimensionError(matrix.cols, length)
    mask = _tail_mask(length)
    out = np.empty((inputs.shape[0], matrix.rows), dtype=np.int64)
    for j in range(matrix.rows):
        agree = ~(inputs ^ matrix.data[j][None, :])
        agree[:, -1] &= mask
        out[:, j] = np.bitwise_count(agree).sum(axis=1, dtype=np.int64)
    return out
