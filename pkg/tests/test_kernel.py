import numpy as np
import pytest

from egt._binio import Reader, Writer
from egt.errors import FormatError, PatternError, ShapeError
from egt.kernel import (
    footprint,
    iter_word,
    pack,
    pack_nibbles,
    read_section,
    spmv,
    unpack,
    unpack_mask,
    unpack_nibbles,
    write_section,
)
from egt.prune import prune_nm
from egt.quant import GroupQuantSpec, dequantize, quantize_matrix


def naive_words(mask):
    """Independent oracle: write 2-bit fields into a bit string, cut into 16-bit words."""
    bits = ""
    for row in mask:
        for c in range(len(row)):
            if row[c]:
                bits += format(c % 4, "02b")
    while len(bits) % 16:
        bits += "0"
    return [int(bits[i:i + 16], 2) for i in range(0, len(bits), 16)]


def random_case(rng, rows=None, cols=None, n=None, quantized=True, g=None):
    rows = int(rng.integers(1, 33)) if rows is None else rows
    cols = int(rng.integers(1, 33)) * 4 if cols is None else cols
    n = int(rng.choice([1, 2])) if n is None else n
    W = rng.standard_normal((rows, cols)).astype(np.float32)
    mask = prune_nm(rng.random((rows, cols)), n)
    if not quantized:
        return W, mask, n, W
    g = int(rng.choice([16, 32, 64, 128])) if g is None else g
    q = quantize_matrix(W, GroupQuantSpec.uniform(rows, g), mask)
    return W, mask, n, q


def test_worked_example_word():
    mask = np.zeros((1, 8), bool)
    mask[0, [1, 3, 4, 6]] = True
    p = pack(mask, np.ones((1, 8), np.float32), 2)
    assert list(p.index_words) == [0x7200]
    assert naive_words(mask) == [0x7200]
    assert list(iter_word(0x7200))[:4] == [1, 3, 0, 2]


def test_all_zero_positions():
    mask = np.zeros((3, 16), bool)
    mask[:, ::4] = True
    assert np.all(pack(mask, np.ones((3, 16)), 1).index_words == 0)


def test_fuzzed_against_bit_writer():
    rng = np.random.default_rng(0)
    for _ in range(50):
        _, mask, n, q = random_case(rng)
        p = pack(mask, q, n)
        assert list(p.index_words) == naive_words(mask)
        assert p.index_words.size == -(-p.nnz // 8)


def test_round_trip_200():
    rng = np.random.default_rng(1)
    for i in range(200):
        W, mask, n, vals = random_case(rng, quantized=bool(i % 2))
        p = pack(mask, vals, n)
        assert np.array_equal(unpack_mask(p), mask)
        want = dequantize(vals) * mask if i % 2 else W * mask
        assert np.array_equal(unpack(p), want.astype(np.float32))
        if i % 2:
            assert np.array_equal(unpack_nibbles(p.value_bytes, p.nnz), vals.codes[mask])


def test_nibble_order():
    assert list(pack_nibbles(np.array([1, 2, 3]))) == [0x21, 0x03]
    assert list(unpack_nibbles(np.array([0x21, 0x03], np.uint8), 3)) == [1, 2, 3]


def test_empty_matrix():
    p = pack(np.zeros((0, 8), bool), np.zeros((0, 8), np.float32), 2)
    assert unpack(p).shape == (0, 8)
    assert spmv(p, np.ones(8)).shape == (0,)


def test_zero_point_row_unpacks_to_zero():
    W = np.zeros((1, 8), np.float32)
    mask = prune_nm(np.ones((1, 8)), 1)
    q = quantize_matrix(W, GroupQuantSpec.uniform(1, 8), mask)
    assert np.all(q.codes[mask] == q.zero_points[0])
    assert np.all(unpack(pack(mask, q, 1)) == 0)


def test_pack_rejects_bad_mask():
    with pytest.raises(PatternError):
        pack(np.ones((1, 4), bool), np.ones((1, 4)), 2)
    with pytest.raises(PatternError):
        pack(np.ones((1, 4), bool), np.ones((1, 4)), 3)


def test_spmv_example():
    W = np.array([[0, 2, 0, -1]], np.float32)
    mask = np.array([[False, True, False, True]])
    assert spmv(pack(mask, W, 2), np.ones(4)).tolist() == [1.0]
    assert spmv(pack(mask, W, 2), np.zeros(4)).tolist() == [0.0]


def test_spmv_dimension_mismatch():
    mask = prune_nm(np.ones((2, 8)), 2)
    with pytest.raises(ShapeError):
        spmv(pack(mask, np.ones((2, 8)), 2), np.ones(4))


def _rel_err(y, ref):
    return np.linalg.norm(y - ref) / max(np.linalg.norm(ref), 1e-30)


def test_spmv_matches_dense_oracle_300():
    rng = np.random.default_rng(2)
    for i in range(300):
        rows, cols = int(rng.integers(1, 129)), int(rng.integers(1, 129)) * 4
        quantized = bool(i % 2)
        W, mask, n, vals = random_case(rng, rows, cols, quantized=quantized, g=64)
        p = pack(mask, vals, n)
        x = rng.standard_normal(cols).astype(np.float32)
        dense = (dequantize(vals) if quantized else W) * mask
        ref = dense.astype(np.float64) @ x.astype(np.float64)
        assert _rel_err(spmv(p, x).astype(np.float64), ref) <= (1e-4 if quantized else 1e-5)


def test_footprint_worked_example():
    rng = np.random.default_rng(3)
    W, mask, n, q = random_case(rng, 1, 64, 2, g=64)
    rep = footprint(pack(mask, q, 2))
    assert (rep.index_bytes, rep.value_bytes, rep.scale_bytes) == (8, 16, 5)
    assert rep.packed_bytes == 29 and rep.baseline_csr_bytes == 136
    assert rep.ratio == pytest.approx(29 / 136)


def test_footprint_rejects_dense():
    p = pack(prune_nm(np.ones((1, 4)), 2), np.ones((1, 4)), 2)
    object.__setattr__(p, "n", 4)
    with pytest.raises(PatternError):
        footprint(p)


def _reports(cols, rows=16, g=64, seed=4):
    W = np.random.default_rng(seed).standard_normal((rows, cols)).astype(np.float32)
    out = {}
    for n in (1, 2):
        mask = prune_nm(np.abs(W), n)
        out[n] = footprint(pack(mask, quantize_matrix(W, GroupQuantSpec.uniform(rows, g), mask), n))
    return out


@pytest.mark.parametrize("cols", [64, 128, 512])
def test_footprint_sparser_is_fewer_bytes(cols):
    rep = _reports(cols)
    assert rep[1].packed_bytes < rep[2].packed_bytes
    assert rep[1].ratio <= 0.30 and rep[2].ratio <= 0.30
    # scale bytes do not shrink with sparsity while the CSR baseline halves
    assert rep[1].ratio > rep[2].ratio


@pytest.mark.xfail(strict=True, reason="per-group scale bytes are fixed, so the 1:4 ratio exceeds the 2:4 ratio")
def test_footprint_ratio_lower_for_sparser_pattern():
    rep = _reports(128)
    assert rep[1].ratio < rep[2].ratio


def test_malformed_header():
    mask = prune_nm(np.ones((2, 8)), 2)
    p = pack(mask, np.ones((2, 8)), 2)
    object.__setattr__(p, "index_words", p.index_words[:0])
    with pytest.raises(FormatError, match="malformed header"):
        unpack(p)


def test_decreasing_in_block_positions_rejected():
    mask = prune_nm(np.ones((1, 4)), 2)
    p = pack(mask, np.ones((1, 4)), 2)
    object.__setattr__(p, "index_words", np.array([0x4000], np.uint16))  # positions [1, 0]
    with pytest.raises(FormatError):
        unpack(p)


def test_section_round_trip():
    rng = np.random.default_rng(5)
    _, mask, n, q = random_case(rng)
    p = pack(mask, q, n)
    w = Writer()
    write_section(w, p)
    got = read_section(Reader(w.getvalue()), "layer")
    assert got[:4] == (p.n, p.m, p.rows, p.cols)
    assert np.array_equal(got[4], p.index_words)
