"""2bit-CSR: packed N:4 sparse matrices with INT4 values, and their GEMV.

Every retained weight stores only its 2-bit position inside its aligned block
of four columns. Positions are streamed row-major in nonzero order and packed
eight to a 16-bit word, first entry in the two most significant bits::

    word = idx0 << 14 | idx1 << 12 | ... | idx7 << 0

so a reader recovers them by repeatedly taking ``word >> 14`` and shifting
the word left by two. Because every block keeps exactly ``N`` weights, row
``r`` owns nonzeros ``[r * cols * N / 4, (r + 1) * cols * N / 4)`` and no row
pointer array is stored.

Values are either INT4 codes (two per byte, low nibble first) with the
group-wise scales and zero-points of :class:`~egt.quant.QuantizedMatrix`,
or plain float32 for the unquantized sparse path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._binio import Reader, Writer
from .errors import FormatError, PatternError, ShapeError
from .prune import M, check_nm
from .quant import GroupQuantSpec, QuantizedMatrix

IDX_PER_WORD = 8
_SHIFTS = np.arange(14, -1, -2, dtype=np.uint16)


@dataclass(frozen=True)
class PackedSparseMatrix:
    n: int
    m: int
    rows: int
    cols: int
    index_words: np.ndarray  # uint16 [ceil(nnz / 8)]
    value_bytes: np.ndarray | None  # uint8 [ceil(nnz / 2)], INT4 codes
    fp_values: np.ndarray | None  # float32 [nnz], unquantized path
    group_sizes: np.ndarray | None  # int [rows]
    scales: np.ndarray | None  # float32 [n_groups]
    zero_points: np.ndarray | None  # uint8 [n_groups]

    @property
    def nnz(self) -> int:
        return self.rows * self.cols * self.n // self.m

    @property
    def nnz_per_row(self) -> int:
        return self.cols * self.n // self.m

    @property
    def quantized(self) -> bool:
        return self.value_bytes is not None


@dataclass(frozen=True)
class FootprintReport:
    packed_bytes: int
    baseline_csr_bytes: int
    ratio: float
    index_bytes: int
    value_bytes: int
    scale_bytes: int


def pack_indices(idx: np.ndarray) -> np.ndarray:
    """Pack a stream of 2-bit values MSB-first into uint16 words."""
    idx = np.asarray(idx, dtype=np.uint16)
    n_words = -(-idx.size // IDX_PER_WORD)
    padded = np.zeros(n_words * IDX_PER_WORD, dtype=np.uint16)
    padded[:idx.size] = idx
    return np.bitwise_or.reduce(padded.reshape(n_words, IDX_PER_WORD) << _SHIFTS, axis=1).astype(np.uint16)


def unpack_indices(words: np.ndarray, count: int) -> np.ndarray:
    words = np.asarray(words, dtype=np.uint16)
    return ((words[:, None] >> _SHIFTS) & 3).astype(np.uint8).ravel()[:count]


def iter_word(word: int):
    """Scalar decode of one index word: take the top two bits, shift left by two."""
    for _ in range(IDX_PER_WORD):
        yield (word >> 14) & 3
        word = (word << 2) & 0xFFFF


def pack_nibbles(codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.uint8)
    if codes.size % 2:
        codes = np.append(codes, np.uint8(0))
    pairs = codes.reshape(-1, 2)
    return (pairs[:, 0] & 0xF) | ((pairs[:, 1] & 0xF) << 4)


def unpack_nibbles(data: np.ndarray, count: int) -> np.ndarray:
    data = np.asarray(data, dtype=np.uint8)
    out = np.empty(data.size * 2, dtype=np.uint8)
    out[0::2] = data & 0xF
    out[1::2] = data >> 4
    return out[:count]


def pack(mask: np.ndarray, values, n: int, m: int = M) -> PackedSparseMatrix:
    """Pack the retained entries of ``values`` under an exact N:M ``mask``.

    ``values`` is a :class:`QuantizedMatrix` (INT4 path) or a float array.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ShapeError("mask must be 2-D")
    check_nm(mask, n, m)
    rows, cols = mask.shape
    idx = np.nonzero(mask)[1] % m
    words = pack_indices(idx)
    if isinstance(values, QuantizedMatrix):
        if values.shape != mask.shape:
            raise ShapeError(f"quantized shape {values.shape} differs from mask {mask.shape}")
        return PackedSparseMatrix(
            n, m, rows, cols, words,
            value_bytes=pack_nibbles(values.codes[mask]),
            fp_values=None,
            group_sizes=np.asarray(values.spec.group_sizes, dtype=np.int64).copy(),
            scales=values.scales.astype(np.float32).copy(),
            zero_points=values.zero_points.astype(np.uint8).copy(),
        )
    dense = np.asarray(values, dtype=np.float32)
    if dense.shape != mask.shape:
        raise ShapeError(f"value shape {dense.shape} differs from mask {mask.shape}")
    return PackedSparseMatrix(n, m, rows, cols, words, None, dense[mask].copy(), None, None, None)


def _validate(p: PackedSparseMatrix) -> None:
    if p.m != M or p.n not in (1, 2):
        raise FormatError(f"malformed header: unsupported pattern {p.n}:{p.m}")
    if p.cols % p.m:
        raise FormatError(f"malformed header: cols={p.cols} not a multiple of {p.m}")
    if p.index_words.size != -(-p.nnz // IDX_PER_WORD):
        raise FormatError(f"malformed header: {p.index_words.size} index words for {p.nnz} nonzeros")
    if p.quantized:
        if p.value_bytes.size != -(-p.nnz // 2):
            raise FormatError("malformed header: value byte count does not match nnz")
        offsets = GroupQuantSpec(p.group_sizes).group_offsets(p.cols)
        if p.group_sizes.size != p.rows or p.scales.size != offsets[-1] or p.zero_points.size != offsets[-1]:
            raise FormatError("malformed header: scale table does not match group spec")
    elif p.fp_values is None or p.fp_values.size != p.nnz:
        raise FormatError("malformed header: value count does not match nnz")


def _columns(p: PackedSparseMatrix) -> np.ndarray:
    """Absolute column of every nonzero, ``[rows, nnz_per_row]``."""
    idx = unpack_indices(p.index_words, p.nnz).reshape(p.rows, p.nnz_per_row).astype(np.int64)
    if p.n > 1 and idx.size:
        pairs = idx.reshape(p.rows, -1, p.n)
        if np.any(np.diff(pairs, axis=-1) <= 0):
            raise FormatError("in-block positions are not strictly increasing")
    base = np.arange(p.nnz_per_row, dtype=np.int64) // p.n * p.m
    return base[None, :] + idx


def _values(p: PackedSparseMatrix, cols: np.ndarray) -> np.ndarray:
    """Dequantized value of every nonzero, ``[rows, nnz_per_row]`` float32."""
    if not p.quantized:
        return p.fp_values.reshape(p.rows, p.nnz_per_row)
    codes = unpack_nibbles(p.value_bytes, p.nnz).reshape(p.rows, p.nnz_per_row)
    gs = np.asarray(p.group_sizes, dtype=np.int64)
    offsets = GroupQuantSpec(gs).group_offsets(p.cols)[:p.rows]
    gid = offsets[:, None] + cols // gs[:, None]
    return (codes.astype(np.float32) - p.zero_points[gid].astype(np.float32)) * p.scales[gid]


def unpack(p: PackedSparseMatrix) -> np.ndarray:
    """Dense float32 reconstruction with zeros at dropped positions."""
    _validate(p)
    out = np.zeros((p.rows, p.cols), dtype=np.float32)
    if p.nnz == 0:
        return out
    cols = _columns(p)
    np.put_along_axis(out, cols, _values(p, cols), axis=1)
    return out


def unpack_mask(p: PackedSparseMatrix) -> np.ndarray:
    _validate(p)
    mask = np.zeros((p.rows, p.cols), dtype=bool)
    if p.nnz:
        np.put_along_axis(mask, _columns(p), True, axis=1)
    return mask


def spmv(p: PackedSparseMatrix, x: np.ndarray) -> np.ndarray:
    """``y = W @ x`` straight from the packed form, float32, left-to-right per row."""
    x = np.asarray(x, dtype=np.float32)
    if x.shape != (p.cols,):
        raise ShapeError(f"x has shape {x.shape}, expected ({p.cols},)")
    _validate(p)
    y = np.zeros(p.rows, dtype=np.float32)
    if p.nnz == 0:
        return y
    cols = _columns(p)
    prod = _values(p, cols) * x[cols]
    # one column of partial products at a time: each row accumulates in order
    for k in range(p.nnz_per_row):
        y += prod[:, k]
    return y


def dense_gemv(W: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.asarray(W, dtype=np.float32) @ np.asarray(x, dtype=np.float32)


def footprint(p: PackedSparseMatrix) -> FootprintReport:
    """Packed bytes against CSR with u16 column indices, fp16 values and u32 row pointers."""
    if p.n == p.m:
        raise PatternError("dense pattern has no 2bit-CSR footprint")
    index = 2 * p.index_words.size
    if p.quantized:
        values = int(p.value_bytes.size)
        scale = 5 * int(p.scales.size)
    else:
        values = 4 * p.nnz
        scale = 0
    packed = index + values + scale
    baseline = p.nnz * (2 + 2) + (p.rows + 1) * 4
    return FootprintReport(packed, baseline, packed / baseline if baseline else 0.0, index, values, scale)


# ---------------------------------------------------------------------------
# binary section (embedded in compressed-model records)


def write_section(out: Writer, p: PackedSparseMatrix) -> None:
    out.pack("BBII", p.n, p.m, p.rows, p.cols)
    out.array(p.index_words, "u2")


def read_section(r: Reader, what: str) -> tuple[int, int, int, int, np.ndarray]:
    n, m, rows, cols = r.unpack("BBII", f"{what} packed header")
    if m != M or n not in (1, 2):
        raise FormatError(f"{what}: malformed header, pattern {n}:{m}")
    nnz = rows * cols * n // m
    words = r.array(-(-nnz // IDX_PER_WORD), "u2", f"{what} index words")
    return n, m, rows, cols, words
