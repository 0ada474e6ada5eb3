"""End-to-end compression of a :class:`~egt.model.ToyTransformer`.

Pipeline per linear layer: calibrate, score elements, choose the layer's
N:M pattern from its relative importance, prune, then quantize the retained
weights with per-channel adaptive group sizes. Group boundaries follow the
original column indices so a kernel maps column to group with one divide.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._binio import Reader, Writer, check_header
from .errors import ConfigError, FormatError
from .kernel import PackedSparseMatrix, pack, pack_nibbles, read_section, unpack_indices, unpack_nibbles, write_section
from .model import ToyTransformer, calibrate
from .prune import DENSE, M, importance_scores, layer_importance, parse_pattern, plan_sparsity, prune_nm
from .quant import GroupQuantSpec, QuantizedMatrix, assign_group_sizes, channel_sensitivity, dequantize, quantize_matrix

QUANT_MAGIC = b"EGTQ"
QUANT_VERSION = 1
SPARSITY_MODES = ("adaptive", "2:4", "1:4", "dense")


@dataclass
class CompressedLayer:
    name: str
    pattern: int  # kept per block of 4; 0 = dense
    mask: np.ndarray | None  # None for dense layers
    quant: QuantizedMatrix | None  # None when quantization is disabled
    fp_values: np.ndarray | None  # W * mask, when quantization is disabled

    @property
    def shape(self) -> tuple[int, int]:
        if self.quant is not None:
            return self.quant.shape
        return self.fp_values.shape

    def dense_weight(self) -> np.ndarray:
        """The effective float32 weight matrix this layer computes with."""
        if self.quant is not None:
            return dequantize(self.quant)
        return self.fp_values

    def packed(self) -> PackedSparseMatrix:
        if self.pattern == DENSE:
            raise ConfigError(f"{self.name}: dense layer has no packed form")
        return pack(self.mask, self.quant if self.quant is not None else self.fp_values, self.pattern, M)


@dataclass
class CompressedModel:
    layers: dict[str, CompressedLayer]

    def to_bytes(self) -> bytes:
        return compressed_to_bytes(self)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def compress_layer(name, W, x_norms, grads, pattern, *, quantize=True, rho_q=0.5, g_fine=64, g_coarse=128):
    W = np.asarray(W, dtype=np.float32)
    if pattern == DENSE:
        mask = None
        kept = W
    else:
        mask = prune_nm(importance_scores(W, x_norms, grads), pattern, M)
        kept = np.where(mask, W, np.float32(0.0))
    if not quantize:
        return CompressedLayer(name, pattern, mask, None, kept)
    # zero-inclusive ranges make quantizing W*mask identical to quantizing the kept set
    sens = channel_sensitivity(kept, x_norms, g_coarse)
    spec = assign_group_sizes(sens, rho_q, g_fine, g_coarse)
    return CompressedLayer(name, pattern, mask, quantize_matrix(W, spec, keep=mask), None)


def compress_model(model: ToyTransformer, batch, rho_q=0.5, rho_s=0.5, g_fine=64, g_coarse=128,
                   sparsity="adaptive", quantize=True, trace=None) -> CompressedModel:
    """Compress every linear layer of ``model``.

    ``sparsity`` is ``"adaptive"`` (importance plan over layers), a fixed
    ``"2:4"``/``"1:4"``, or ``"dense"`` for quantization only. ``quantize=False``
    keeps float values (sparsity only).
    """
    if sparsity not in SPARSITY_MODES:
        raise ConfigError(f"sparsity must be one of {SPARSITY_MODES}, got {sparsity!r}")
    if sparsity == "dense" and not quantize:
        raise ConfigError("nothing to do: dense sparsity with quantization disabled")
    if trace is None:
        trace = calibrate(model, batch)
    names = model.linear_names()
    if sparsity == "adaptive":
        imps = [layer_importance(importance_scores(model.weights[nm], trace.x_norms[nm], trace.grads[nm]),
                                 model.weights[nm]) for nm in names]
        patterns = plan_sparsity(imps, rho_s, names).patterns
    else:
        patterns = [parse_pattern(sparsity)] * len(names)
    layers = {}
    for nm, pattern in zip(names, patterns):
        layers[nm] = compress_layer(nm, model.weights[nm], trace.x_norms[nm], trace.grads[nm], pattern,
                                    quantize=quantize, rho_q=rho_q, g_fine=g_fine, g_coarse=g_coarse)
    return CompressedModel(layers)


def materialize(model: ToyTransformer, compressed: CompressedModel) -> ToyTransformer:
    """A dense model computing with the compressed weights."""
    return model.with_weights({nm: layer.dense_weight() for nm, layer in compressed.layers.items()})


# ---------------------------------------------------------------------------
# EGTQ file


def compressed_to_bytes(cm: CompressedModel) -> bytes:
    out = Writer()
    out.raw(QUANT_MAGIC)
    out.pack("I", QUANT_VERSION)
    out.pack("I", len(cm.layers))
    for layer in cm.layers.values():
        rows, cols = layer.shape
        out.name(layer.name)
        out.pack("BBII", layer.pattern, int(layer.quant is not None), rows, cols)
        keep = layer.mask if layer.mask is not None else np.ones((rows, cols), dtype=bool)
        if layer.quant is not None:
            q = layer.quant
            out.array(q.spec.group_sizes, "u2")
            out.array(q.scales, "f4")
            out.array(q.zero_points, "u1")
            out.array(pack_nibbles(q.codes[keep]), "u1")
        else:
            out.array(layer.fp_values[keep], "f4")
        if layer.pattern != DENSE:
            out.array(np.packbits(layer.mask.ravel(), bitorder="little"), "u1")
            write_section(out, layer.packed())
    return out.getvalue()


def compressed_from_bytes(data: bytes) -> CompressedModel:
    r = Reader(data)
    check_header(r, QUANT_MAGIC, QUANT_VERSION)
    (count,) = r.unpack("I", "layer count")
    layers = {}
    for _ in range(count):
        name = r.name("layer name")
        pattern, quantized, rows, cols = r.unpack("BBII", f"layer '{name}' header")
        if pattern not in (DENSE, 1, 2):
            raise FormatError(f"layer '{name}': unknown pattern code {pattern}")
        nnz = rows * cols if pattern == DENSE else rows * cols * pattern // M
        if quantized:
            gs = r.array(rows, "u2", f"layer '{name}' group sizes").astype(np.int64)
            if np.any(gs == 0):
                raise FormatError(f"layer '{name}': zero group size")
            spec = GroupQuantSpec(gs)
            n_groups = int(spec.group_offsets(cols)[-1])
            scales = r.array(n_groups, "f4", f"layer '{name}' scales")
            zps = r.array(n_groups, "u1", f"layer '{name}' zero-points")
            codes_flat = unpack_nibbles(r.array(-(-nnz // 2), "u1", f"layer '{name}' codes"), nnz)
        else:
            values = r.array(nnz, "f4", f"layer '{name}' values")
        mask = None
        if pattern != DENSE:
            bits = r.array(-(-rows * cols // 8), "u1", f"layer '{name}' mask")
            mask = np.unpackbits(bits, count=rows * cols, bitorder="little").astype(bool).reshape(rows, cols)
            n, _, prow, pcol, words = read_section(r, f"layer '{name}'")
            if (n, prow, pcol) != (pattern, rows, cols):
                raise FormatError(f"layer '{name}': packed header disagrees with layer header")
            cols_idx = np.nonzero(mask)[1] % M
            if not np.array_equal(unpack_indices(words, cols_idx.size), cols_idx):
                raise FormatError(f"layer '{name}': packed indices disagree with mask")
        keep = mask if mask is not None else np.ones((rows, cols), dtype=bool)
        if int(keep.sum()) != nnz:
            raise FormatError(f"layer '{name}': mask keeps {int(keep.sum())} weights, expected {nnz}")
        if quantized:
            gid = QuantizedMatrix(np.zeros((rows, cols), np.uint8), scales, zps, spec).group_index()
            codes = zps[gid].astype(np.uint8)
            codes[keep] = codes_flat
            layers[name] = CompressedLayer(name, pattern, mask, QuantizedMatrix(codes, scales, zps, spec, mask), None)
        else:
            dense = np.zeros((rows, cols), dtype=np.float32)
            dense[keep] = values
            layers[name] = CompressedLayer(name, pattern, mask, None, dense)
    if r.remaining():
        raise FormatError(f"{r.remaining()} trailing bytes after last layer")
    return CompressedModel(layers)


def save_compressed(cm: CompressedModel, path) -> None:
    Path(path).write_bytes(compressed_to_bytes(cm))


def load_compressed(path) -> CompressedModel:
    return compressed_from_bytes(Path(path).read_bytes())
