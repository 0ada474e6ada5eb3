"""Element importance and layer-adaptive N:M pruning.

Element importance is ``|W_ij| * ||X_j||_2 + |W_ij| * |dE/dW_ij|``: the
activation-weighted magnitude used by Wanda plus a first-order loss term.
Layers are ranked by mean importance (normalized by mean weight magnitude);
the more important fraction keeps 2 of every 4 weights, the rest keep 1.

Patterns are encoded by the number of kept weights per block of four:
``2`` is 2:4, ``1`` is 1:4 and ``0`` means dense.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, PatternError, ShapeError

M = 4
DENSE = 0
PATTERN_NAMES = {DENSE: "dense", 1: "1:4", 2: "2:4"}


def pattern_name(n: int) -> str:
    return PATTERN_NAMES[n]


def parse_pattern(text: str) -> int:
    for n, name in PATTERN_NAMES.items():
        if text == name:
            return n
    raise PatternError(f"unsupported pattern {text!r}; expected one of {sorted(PATTERN_NAMES.values())}")


def importance_scores(W: np.ndarray, x_norms: np.ndarray, grads: np.ndarray) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    x_norms = np.asarray(x_norms, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if W.ndim != 2 or x_norms.shape != (W.shape[1],) or grads.shape != W.shape:
        raise ShapeError(
            f"shape mismatch: W {W.shape}, x_norms {x_norms.shape}, grads {grads.shape}")
    a = np.abs(W)
    return a * x_norms[None, :] + a * np.abs(grads)


def _check_nm(n: int, m: int) -> None:
    if m != M or n not in (1, 2):
        raise PatternError(f"unsupported N:M pattern {n}:{m}; only 1:4 and 2:4")


def prune_nm(scores: np.ndarray, n: int, m: int = M) -> np.ndarray:
    """Keep mask selecting the ``n`` highest scores in every aligned block of ``m`` columns.

    Ties go to the lower column. A trailing partial block keeps
    ``min(n, width)`` elements.
    """
    _check_nm(n, m)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ShapeError("scores must be 2-D")
    rows, cols = scores.shape
    pad = (-cols) % m
    padded = np.pad(scores, ((0, 0), (0, pad)), constant_values=-np.inf)
    blocks = padded.reshape(rows, -1, m)
    order = np.argsort(-blocks, axis=-1, kind="stable")
    keep = np.zeros(blocks.shape, dtype=bool)
    np.put_along_axis(keep, order[..., :n], True, axis=-1)
    keep = keep.reshape(rows, -1)[:, :cols]
    return keep


def check_nm(mask: np.ndarray, n: int, m: int = M) -> None:
    """Raise PatternError unless each full block of ``m`` keeps exactly ``n``."""
    _check_nm(n, m)
    mask = np.asarray(mask, dtype=bool)
    rows, cols = mask.shape
    if cols % m:
        raise PatternError(f"{cols} columns is not a multiple of {m}")
    counts = mask.reshape(rows, cols // m, m).sum(axis=-1)
    if np.any(counts != n):
        r, b = np.argwhere(counts != n)[0]
        raise PatternError(f"row {r} block {b} keeps {counts[r, b]} of {m}, expected {n}")


def layer_importance(scores: np.ndarray, W: np.ndarray) -> float:
    """Mean element importance normalized by mean weight magnitude."""
    mean_w = float(np.abs(W).mean())
    if mean_w == 0.0:
        return 0.0
    return float(np.mean(scores)) / mean_w


@dataclass
class LayerSparsityPlan:
    names: list[str]
    patterns: list[int]
    importances: list[float]

    def pattern_of(self, name: str) -> int:
        return self.patterns[self.names.index(name)]


def plan_sparsity(importances, rho_s: float, names=None) -> LayerSparsityPlan:
    """Top ``ceil(rho_s * L)`` layers get 2:4, the rest 1:4; ties favor earlier layers."""
    if not 0.0 <= rho_s <= 1.0:
        raise ConfigError(f"rho_s must lie in [0, 1], got {rho_s}")
    imp = np.asarray(importances, dtype=np.float64)
    if imp.ndim != 1 or imp.size == 0:
        raise ConfigError("plan_sparsity needs at least one layer")
    if not np.all(np.isfinite(imp)):
        raise ConfigError("layer importances must be finite")
    names = list(names) if names is not None else [str(i) for i in range(imp.size)]
    n_dense = int(np.ceil(rho_s * imp.size - 1e-12))
    order = np.argsort(-imp, kind="stable")
    patterns = np.full(imp.size, 1, dtype=int)
    patterns[order[:n_dense]] = 2
    return LayerSparsityPlan(names, [int(p) for p in patterns], [float(v) for v in imp])
