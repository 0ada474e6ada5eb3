"""Group-wise asymmetric INT4 weight quantization with adaptive group sizes.

Every output channel (row) is split into contiguous groups along the input
dimension. Channels whose quantization error, weighted by calibration
activation norms, is largest get the fine group size; the rest get the
coarse one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

QMAX = 15
SCALE_EPS = 1e-8


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class GroupQuantSpec:
    """Per-row group sizes. Groups start at multiples of the row's size."""

    group_sizes: np.ndarray  # int, one per row
    bits: int = 4
    symmetric: bool = False

    @classmethod
    def uniform(cls, rows: int, group_size: int) -> "GroupQuantSpec":
        return cls(np.full(rows, group_size, dtype=np.int64))

    @property
    def rows(self) -> int:
        return len(self.group_sizes)

    def groups_per_row(self, cols: int) -> np.ndarray:
        return -(-cols // np.asarray(self.group_sizes, dtype=np.int64))

    def group_offsets(self, cols: int) -> np.ndarray:
        """Start index of each row's groups in the flat scale table, plus the total."""
        return np.concatenate([[0], np.cumsum(self.groups_per_row(cols))]).astype(np.int64)


@dataclass
class QuantizedMatrix:
    """INT4 codes for a ``[rows, cols]`` matrix.

    ``codes`` is dense-shaped; entries outside ``keep`` are meaningless and set
    to the group zero-point. ``scales``/``zero_points`` are flat, indexed by
    ``spec.group_offsets(cols)[row] + col // group_size[row]``.
    """

    codes: np.ndarray  # uint8 [rows, cols]
    scales: np.ndarray  # float32 [n_groups]
    zero_points: np.ndarray  # uint8 [n_groups]
    spec: GroupQuantSpec
    keep: np.ndarray | None = None  # bool [rows, cols]; None = all retained

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    def group_index(self) -> np.ndarray:
        """Flat group id for every element, ``[rows, cols]``."""
        rows, cols = self.codes.shape
        offsets = self.spec.group_offsets(cols)[:rows]
        col = np.arange(cols)[None, :]
        gs = np.asarray(self.spec.group_sizes, dtype=np.int64)[:, None]
        return offsets[:, None] + col // gs


def quantize_group(w: np.ndarray) -> tuple[float, int, np.ndarray]:
    """Scale, zero-point and codes for one group of values.

    The range always includes 0 so every value lies on the code grid.
    """
    w = np.asarray(w, dtype=np.float64)
    mn = min(float(w.min()), 0.0) if w.size else 0.0
    mx = max(float(w.max()), 0.0) if w.size else 0.0
    scale = float(np.float32(max(SCALE_EPS, (mx - mn) / QMAX)))
    # -mn / scale written as a ratio of the range so that exact halves stay exact
    zp_exact = -mn * QMAX / (mx - mn) if mx > mn else 0.0
    zp = int(np.clip(round_half_away(np.float64(zp_exact)), 0, QMAX))
    codes = np.clip(round_half_away(w / scale) + zp, 0, QMAX).astype(np.uint8)
    return scale, zp, codes


def quantize_matrix(W: np.ndarray, spec: GroupQuantSpec, keep: np.ndarray | None = None) -> QuantizedMatrix:
    """Quantize ``W`` group by group; when ``keep`` is given, ranges cover retained weights only."""
    W = np.asarray(W, dtype=np.float32)
    if W.ndim != 2:
        raise ShapeError("weight matrix must be 2-D")
    if not np.all(np.isfinite(W)):
        raise ConfigError("cannot quantize non-finite weights")
    rows, cols = W.shape
    if spec.rows != rows:
        raise ShapeError(f"group spec covers {spec.rows} rows, matrix has {rows}")
    if keep is not None:
        keep = np.asarray(keep, dtype=bool)
        if keep.shape != W.shape:
            raise ShapeError("keep mask shape differs from weight shape")
    offsets = spec.group_offsets(cols)
    scales = np.empty(offsets[-1], dtype=np.float32)
    zps = np.empty(offsets[-1], dtype=np.uint8)
    codes = np.empty((rows, cols), dtype=np.uint8)
    for r in range(rows):
        g = int(spec.group_sizes[r])
        for gi, start in enumerate(range(0, cols, g)):
            sl = slice(start, min(start + g, cols))
            vals = W[r, sl]
            sel = keep[r, sl] if keep is not None else np.ones(vals.shape, dtype=bool)
            scale, zp, group_codes = quantize_group(vals[sel])
            row_codes = np.full(vals.shape, zp, dtype=np.uint8)
            row_codes[sel] = group_codes
            codes[r, sl] = row_codes
            scales[offsets[r] + gi] = scale
            zps[offsets[r] + gi] = zp
    return QuantizedMatrix(codes, scales, zps, spec, keep)


def dequantize(q: QuantizedMatrix) -> np.ndarray:
    gid = q.group_index()
    out = (q.codes.astype(np.float32) - q.zero_points[gid].astype(np.float32)) * q.scales[gid]
    if q.keep is not None:
        out = np.where(q.keep, out, np.float32(0.0))
    return out.astype(np.float32)


def weighted_quant_error(W: np.ndarray, spec: GroupQuantSpec, x_norms: np.ndarray) -> np.ndarray:
    """Per-row sum of (x_norm * quantization error)^2."""
    err = (np.asarray(W, dtype=np.float64) - dequantize(quantize_matrix(W, spec))) * np.asarray(x_norms)[None, :]
    return (err * err).sum(axis=1)


def channel_sensitivity(W: np.ndarray, x_norms: np.ndarray, probe_group: int) -> np.ndarray:
    """Activation-weighted quantization error energy of each output channel."""
    W = np.asarray(W, dtype=np.float32)
    x_norms = np.asarray(x_norms, dtype=np.float64)
    if W.ndim != 2 or x_norms.shape != (W.shape[1],):
        raise ShapeError(f"x_norms of shape {x_norms.shape} does not match {W.shape[1]} columns")
    if probe_group < 1:
        raise ConfigError("probe_group must be >= 1")
    return weighted_quant_error(W, GroupQuantSpec.uniform(W.shape[0], probe_group), x_norms)


def assign_group_sizes(sensitivity: np.ndarray, rho_q: float, g_fine: int, g_coarse: int) -> GroupQuantSpec:
    """Fine groups for the ``ceil(rho_q * rows)`` most sensitive channels."""
    if not 0.0 <= rho_q <= 1.0:
        raise ConfigError(f"rho_q must lie in [0, 1], got {rho_q}")
    if not 1 <= g_fine < g_coarse:
        raise ConfigError(f"need 1 <= g_fine < g_coarse, got {g_fine}, {g_coarse}")
    s = np.asarray(sensitivity, dtype=np.float64)
    n_fine = int(np.ceil(rho_q * len(s) - 1e-12))
    # stable sort on -s keeps lower channel index first among ties
    order = np.argsort(-s, kind="stable")
    sizes = np.full(len(s), g_coarse, dtype=np.int64)
    sizes[order[:n_fine]] = g_fine
    return GroupQuantSpec(sizes)
