"""A small decoder-only transformer in numpy.

The model exists to be compressed and decoded against: it has no training
loop, accepts an arbitrary boolean attention mask plus explicit position
indices (needed for tree-shaped verification batches), and can report the
calibration statistics the pruning criterion consumes: per-input-column
activation norms and backpropagated weight gradients of the next-token loss.

Weight layout follows ``y = W @ x``: a linear layer maps ``cols`` inputs to
``rows`` outputs, which is also the orientation the sparse kernel uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._binio import Reader, Writer, check_header
from .errors import ConfigError, FormatError, ShapeError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
N_RESERVED = 4

MODEL_MAGIC = b"EGTM"
MODEL_VERSION = 1

LINEAR_SUFFIXES = ("attn.q", "attn.k", "attn.v", "attn.o", "ff.up", "ff.down")
_LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 64
    max_positions: int = 128
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_positions"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigError(f"{name} must be a count >= 1, got {value!r}")
        if self.vocab_size < N_RESERVED:
            raise ConfigError(f"vocab_size must be >= {N_RESERVED} (pad/bos/eos/unk reserved)")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model not divisible by n_heads ({self.d_model} % {self.n_heads} != 0)")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def linear_names(config: ModelConfig) -> list[str]:
    """Names of the compressible linear layers, in canonical order."""
    return [f"layers.{i}.{s}" for i in range(config.n_layers) for s in LINEAR_SUFFIXES]


def tensor_shapes(config: ModelConfig) -> dict[str, tuple[int, int]]:
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    shapes = {"embed": (v, d)}
    for i in range(config.n_layers):
        for s in ("attn.q", "attn.k", "attn.v", "attn.o"):
            shapes[f"layers.{i}.{s}"] = (d, d)
        shapes[f"layers.{i}.ff.up"] = (f, d)
        shapes[f"layers.{i}.ff.down"] = (d, f)
    shapes["head"] = (v, d)
    return shapes


def sinusoidal_table(n_positions: int, dim: int) -> np.ndarray:
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    i = np.arange(dim)
    inv_freq = 1.0 / (10000.0 ** ((i // 2) * 2 / dim))
    angles = pos * inv_freq[None, :]
    table = np.where(i % 2 == 0, np.sin(angles), np.cos(angles))
    return table.astype(np.float32)


@dataclass
class ToyTransformer:
    config: ModelConfig
    weights: dict[str, np.ndarray]
    pos_table: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        shapes = tensor_shapes(self.config)
        if set(self.weights) != set(shapes):
            missing = sorted(set(shapes) - set(self.weights))
            extra = sorted(set(self.weights) - set(shapes))
            raise ShapeError(f"weight set mismatch: missing={missing} extra={extra}")
        ordered = {}
        for name, shape in shapes.items():
            w = np.asarray(self.weights[name], dtype=np.float32)
            if w.shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {w.shape}")
            if not np.all(np.isfinite(w)):
                raise ShapeError(f"{name}: non-finite weights")
            w.setflags(write=False)
            ordered[name] = w
        self.weights = ordered
        self.pos_table = sinusoidal_table(self.config.max_positions, self.config.d_model)

    def linear_names(self) -> list[str]:
        return linear_names(self.config)

    def with_weights(self, replacements: dict[str, np.ndarray]) -> "ToyTransformer":
        """Copy of this model with some tensors swapped out."""
        merged = dict(self.weights)
        merged.update(replacements)
        return ToyTransformer(self.config, merged)


def init_random(config: ModelConfig) -> ToyTransformer:
    rng = np.random.default_rng(config.seed)
    bound = 1.0 / math.sqrt(config.d_model)
    weights = {
        name: rng.uniform(-bound, bound, size=shape).astype(np.float32)
        for name, shape in tensor_shapes(config).items()
    }
    return ToyTransformer(config, weights)


# ---------------------------------------------------------------------------
# forward


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def _layernorm(x):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + _LN_EPS)
    return xc * inv, inv


def _layernorm_backward(dy, y, inv):
    return inv * (dy - dy.mean(axis=-1, keepdims=True) - y * (dy * y).mean(axis=-1, keepdims=True))


def _gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * u**3))
    return 0.5 * u * (1.0 + t), t


def _gelu_grad(u, t):
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)


def _masked_softmax(scores, mask):
    s = np.where(mask, scores, -np.inf)
    m = s.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(s - m)
    z = e.sum(axis=-1, keepdims=True)
    # rows with no visible key (inert padding) attend to nothing
    return e / np.where(z > 0, z, 1.0)


def _prepare(model, tokens, mask, positions):
    cfg = model.config
    tokens = np.asarray(tokens, dtype=np.int64)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None, :]
    if tokens.ndim != 2:
        raise ShapeError("tokens must be a 1-D or 2-D array of ids")
    b, n = tokens.shape
    if n == 0:
        raise ShapeError("empty token sequence")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ShapeError(f"token id out of range [0, {cfg.vocab_size})")
    if positions is None:
        positions = np.broadcast_to(np.arange(n), (b, n))
    positions = np.asarray(positions, dtype=np.int64)
    if positions.ndim == 1 and positions.shape[0] == n:
        positions = np.broadcast_to(positions, (b, positions.shape[0]))
    if positions.shape != (b, n):
        raise ShapeError(f"length mismatch: {n} tokens but positions of shape {positions.shape}")
    if positions.min() < 0 or positions.max() >= cfg.max_positions:
        raise ShapeError(f"position overflow: positions must lie in [0, {cfg.max_positions})")
    if mask is None:
        mask = causal_mask(n)
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 2 and mask.shape == (n, n):
        mask = np.broadcast_to(mask, (b, n, n))
    if mask.shape != (b, n, n):
        raise ShapeError(f"length mismatch: mask of shape {mask.shape} for {n} tokens")
    return tokens, mask, positions, single


def _run(model, tokens, mask, positions, keep_cache=False):
    cfg = model.config
    w = model.weights
    b, n = tokens.shape
    nh, hd = cfg.n_heads, cfg.head_dim
    scale = np.float32(1.0 / math.sqrt(hd))
    h = w["embed"][tokens] + model.pos_table[positions]
    amask = mask[:, None, :, :]
    caches = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        a, inv1 = _layernorm(h)
        q = (a @ w[p + "attn.q"].T).reshape(b, n, nh, hd).transpose(0, 2, 1, 3)
        k = (a @ w[p + "attn.k"].T).reshape(b, n, nh, hd).transpose(0, 2, 1, 3)
        v = (a @ w[p + "attn.v"].T).reshape(b, n, nh, hd).transpose(0, 2, 1, 3)
        probs = _masked_softmax((q @ k.transpose(0, 1, 3, 2)) * scale, amask)
        attn = (probs @ v).transpose(0, 2, 1, 3).reshape(b, n, cfg.d_model)
        h = h + attn @ w[p + "attn.o"].T
        a2, inv2 = _layernorm(h)
        u = a2 @ w[p + "ff.up"].T
        g, t = _gelu(u)
        h = h + g @ w[p + "ff.down"].T
        if keep_cache:
            caches.append(dict(a=a, inv1=inv1, q=q, k=k, v=v, probs=probs, attn=attn,
                               a2=a2, inv2=inv2, u=u, g=g, t=t))
    hf, inv_f = _layernorm(h)
    logits = hf @ w["head"].T
    if keep_cache:
        return logits, caches, (hf, inv_f)
    return logits


def forward(model: ToyTransformer, tokens, mask=None, positions=None) -> np.ndarray:
    """Next-token logits for every position.

    ``tokens`` may be ``[len]`` or ``[batch, len]``. ``mask[q, k]`` is true when
    query ``q`` may attend to key ``k``; the default is causal. ``positions``
    defaults to ``0..len-1``. Returns ``[len, vocab]`` (or batched).
    """
    tokens, mask, positions, single = _prepare(model, tokens, mask, positions)
    logits = _run(model, tokens, mask, positions)
    return logits[0] if single else logits


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    m = logits.max(axis=axis, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# calibration


@dataclass
class ForwardTrace:
    """Calibration statistics keyed by linear-layer name."""

    x_norms: dict[str, np.ndarray]
    grads: dict[str, np.ndarray]
    loss: float


def _check_batch(model, batch: Sequence[Sequence[int]]) -> list[np.ndarray]:
    seqs = [np.asarray(s, dtype=np.int64) for s in batch]
    if not seqs:
        raise ShapeError("empty calibration batch")
    cfg = model.config
    for s in seqs:
        if s.ndim != 1 or len(s) < 2:
            raise ShapeError("calibration sequences need at least two tokens")
        if len(s) > cfg.max_positions:
            raise ShapeError(f"calibration sequence longer than max_positions={cfg.max_positions}")
        if s.min() < 0 or s.max() >= cfg.vocab_size:
            raise ShapeError(f"token out of range [0, {cfg.vocab_size})")
    return seqs


def _sequence_backward(model, seq):
    """Loss, per-linear input activations and gradients for one sequence."""
    cfg = model.config
    w = model.weights
    n = len(seq)
    nh, hd, d = cfg.n_heads, cfg.head_dim, cfg.d_model
    scale = np.float32(1.0 / math.sqrt(hd))
    tokens = seq[None, :]
    positions = np.arange(n)[None, :]
    logits, caches, (hf, inv_f) = _run(model, tokens, causal_mask(n)[None], positions, keep_cache=True)

    logits = logits[0]
    logp = log_softmax(logits[:-1])
    targets = seq[1:]
    loss = float(-logp[np.arange(n - 1), targets].mean())
    dlogits = np.zeros_like(logits)
    dlogits[:-1] = np.exp(logp)
    dlogits[np.arange(n - 1), targets] -= 1.0
    dlogits /= n - 1

    dh = _layernorm_backward(dlogits @ w["head"], hf[0], inv_f[0])
    inputs: dict[str, np.ndarray] = {}
    grads: dict[str, np.ndarray] = {}
    for i in reversed(range(cfg.n_layers)):
        p = f"layers.{i}."
        c = {key: val[0] for key, val in caches[i].items()}
        inputs[p + "ff.down"] = c["g"]
        inputs[p + "ff.up"] = c["a2"]
        inputs[p + "attn.o"] = c["attn"]
        for s in ("attn.q", "attn.k", "attn.v"):
            inputs[p + s] = c["a"]

        grads[p + "ff.down"] = dh.T @ c["g"]
        du = (dh @ w[p + "ff.down"]) * _gelu_grad(c["u"], c["t"])
        grads[p + "ff.up"] = du.T @ c["a2"]
        dh = dh + _layernorm_backward(du @ w[p + "ff.up"], c["a2"], c["inv2"])

        grads[p + "attn.o"] = dh.T @ c["attn"]
        dattn = (dh @ w[p + "attn.o"]).reshape(n, nh, hd).transpose(1, 0, 2)
        probs, q, k, v = c["probs"], c["q"], c["k"], c["v"]
        dprobs = dattn @ v.transpose(0, 2, 1)
        dv = probs.transpose(0, 2, 1) @ dattn
        dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True)) * scale
        dq = dscores @ k
        dk = dscores.transpose(0, 2, 1) @ q
        da = np.zeros((n, d), dtype=np.float32)
        for s, dpart in (("attn.q", dq), ("attn.k", dk), ("attn.v", dv)):
            dflat = dpart.transpose(1, 0, 2).reshape(n, d)
            grads[p + s] = dflat.T @ c["a"]
            da += dflat @ w[p + s]
        dh = dh + _layernorm_backward(da, c["a"], c["inv1"])
    return loss, inputs, grads


def loss_and_grads(model: ToyTransformer, batch) -> tuple[float, dict[str, np.ndarray]]:
    """Mean next-token cross-entropy over the batch and its signed gradients."""
    seqs = _check_batch(model, batch)
    total = 0.0
    acc = {name: np.zeros(model.weights[name].shape, dtype=np.float64) for name in model.linear_names()}
    for s in seqs:
        loss, _, grads = _sequence_backward(model, s)
        total += loss
        for name, g in grads.items():
            acc[name] += g
    k = len(seqs)
    return total / k, {name: (g / k).astype(np.float32) for name, g in acc.items()}


def calibration_loss(model: ToyTransformer, batch) -> float:
    """Mean over sequences of the per-sequence mean next-token cross-entropy."""
    seqs = _check_batch(model, batch)
    losses = []
    for s in seqs:
        logp = log_softmax(forward(model, s)[:-1].astype(np.float64))
        losses.append(-logp[np.arange(len(s) - 1), s[1:]].mean())
    return float(np.mean(losses))


def calibrate(model: ToyTransformer, batch) -> ForwardTrace:
    """Activation column norms and mean absolute per-sequence gradients."""
    seqs = _check_batch(model, batch)
    sq = {name: np.zeros(model.weights[name].shape[1], dtype=np.float64) for name in model.linear_names()}
    abs_grads = {name: np.zeros(model.weights[name].shape, dtype=np.float64) for name in model.linear_names()}
    total = 0.0
    for s in seqs:
        loss, inputs, grads = _sequence_backward(model, s)
        total += loss
        for name in sq:
            x = inputs[name].astype(np.float64)
            sq[name] += (x * x).sum(axis=0)
            abs_grads[name] += np.abs(grads[name])
    k = len(seqs)
    return ForwardTrace(
        x_norms={name: np.sqrt(v) for name, v in sq.items()},
        grads={name: g / k for name, g in abs_grads.items()},
        loss=total / k,
    )


# ---------------------------------------------------------------------------
# serialization


def model_to_bytes(model: ToyTransformer) -> bytes:
    cfg = model.config
    out = Writer()
    out.raw(MODEL_MAGIC)
    out.pack("I", MODEL_VERSION)
    out.pack("7I", cfg.vocab_size, cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.d_ff,
             cfg.max_positions, len(model.weights))
    out.pack("Q", cfg.seed)
    for name, w in model.weights.items():
        out.name(name)
        out.pack("II", *w.shape)
        out.array(w, "f4")
    return out.getvalue()


def model_from_bytes(data: bytes) -> ToyTransformer:
    r = Reader(data)
    check_header(r, MODEL_MAGIC, MODEL_VERSION)
    vocab, d_model, n_layers, n_heads, d_ff, max_pos, n_tensors = r.unpack("7I", "config")
    (seed,) = r.unpack("Q", "config seed")
    config = ModelConfig(vocab, d_model, n_layers, n_heads, d_ff, max_pos, seed)
    weights = {}
    for _ in range(n_tensors):
        name = r.name("tensor name")
        rows, cols = r.unpack("II", f"tensor '{name}' shape")
        weights[name] = r.array(rows * cols, "f4", f"tensor '{name}'").reshape(rows, cols)
    if r.remaining():
        raise FormatError(f"{r.remaining()} trailing bytes after last tensor")
    return ToyTransformer(config, weights)


def save_model(model: ToyTransformer, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> ToyTransformer:
    return model_from_bytes(Path(path).read_bytes())


def random_batch(config: ModelConfig, n_sequences: int, length: int, seed: int) -> list[list[int]]:
    """Seeded calibration sequences of non-reserved token ids, each starting with BOS."""
    rng = np.random.default_rng(seed)
    body = rng.integers(N_RESERVED, config.vocab_size, size=(n_sequences, length - 1))
    return [[BOS, *map(int, row)] for row in body]


def iter_linears(model: ToyTransformer) -> Iterable[tuple[str, np.ndarray]]:
    for name in model.linear_names():
        yield name, model.weights[name]
