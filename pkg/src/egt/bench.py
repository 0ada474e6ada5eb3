"""GEMV micro-benchmark over dense, dense-INT4 and packed N:4 INT4 variants.

Wall times are whatever this machine does with numpy; the byte counts are
computed from the storage formats and are the portable part of the report.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError
from .kernel import footprint, pack, spmv
from .prune import prune_nm
from .quant import GroupQuantSpec, dequantize, quantize_matrix

VARIANTS = ("dense-fp", "quant-dense", "packed-2:4", "packed-1:4")
CSV_COLUMNS = ("variant", "rows", "cols", "pattern", "median_ns", "p95_ns", "bytes")


@dataclass
class BenchRow:
    variant: str
    rows: int
    cols: int
    pattern: str
    median_ns: float
    p95_ns: float
    bytes: int


def _time(fn, reps):
    fn()  # warm-up
    samples = np.empty(reps, dtype=np.int64)
    for i in range(reps):
        t0 = time.perf_counter_ns()
        fn()
        samples[i] = time.perf_counter_ns() - t0
    return float(np.median(samples)), float(np.percentile(samples, 95))


def bytes_touched(variant: str, rows: int, cols: int, group_size: int = 64) -> int:
    """Weight-format bytes read plus output bytes written by one GEMV of ``variant``.

    The input vector is left out: every variant reads it the same way.
    """
    io = 4 * rows
    n_groups = rows * -(-cols // group_size)
    if variant == "dense-fp":
        return 4 * rows * cols + io
    if variant == "quant-dense":
        return -(-rows * cols // 2) + 5 * n_groups + io
    if variant in ("packed-2:4", "packed-1:4"):
        n = int(variant[-3])
        nnz = rows * cols * n // 4
        return 2 * -(-nnz // 8) + -(-nnz // 2) + 5 * n_groups + io
    raise ConfigError(f"unknown variant {variant!r}")


def bench_spmv(shapes, repetitions: int = 30, group_size: int = 64, seed: int = 0) -> list[BenchRow]:
    if repetitions < 30:
        raise ConfigError("repetitions must be >= 30")
    rng = np.random.default_rng(seed)
    rows_out = []
    for rows, cols in shapes:
        if cols % 4:
            raise ConfigError(f"cols={cols} must be a multiple of 4")
        W = rng.standard_normal((rows, cols)).astype(np.float32)
        x = rng.standard_normal(cols).astype(np.float32)
        spec = GroupQuantSpec.uniform(rows, group_size)
        q = quantize_matrix(W, spec)
        gid = q.group_index()
        codes_f = q.codes.astype(np.float32)
        zp_f = q.zero_points[gid].astype(np.float32)
        sc = q.scales[gid]

        med, p95 = _time(lambda: W @ x, repetitions)
        rows_out.append(BenchRow("dense-fp", rows, cols, "dense", med, p95, bytes_touched("dense-fp", rows, cols, group_size)))
        med, p95 = _time(lambda: ((codes_f - zp_f) * sc) @ x, repetitions)
        rows_out.append(BenchRow("quant-dense", rows, cols, "dense", med, p95, bytes_touched("quant-dense", rows, cols, group_size)))
        for n in (2, 1):
            mask = prune_nm(np.abs(W), n)
            packed = pack(mask, quantize_matrix(W, spec, keep=mask), n)
            med, p95 = _time(lambda: spmv(packed, x), repetitions)
            variant = f"packed-{n}:4"
            measured = footprint(packed).packed_bytes + 4 * rows
            analytic = bytes_touched(variant, rows, cols, group_size)
            assert measured == analytic, (variant, measured, analytic)
            rows_out.append(BenchRow(variant, rows, cols, f"{n}:4", med, p95, analytic))
    return rows_out


def write_bench_csv(rows: list[BenchRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(asdict(row))


def speedups(rows: list[BenchRow]) -> dict[tuple[int, int, str], float]:
    """Median dense-fp time divided by each variant's median, per shape."""
    base = {(r.rows, r.cols): r.median_ns for r in rows if r.variant == "dense-fp"}
    return {(r.rows, r.cols, r.variant): base[(r.rows, r.cols)] / r.median_ns for r in rows}
