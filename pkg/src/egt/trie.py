"""Semantic identifiers by recursive clustering, and the prefix tree over them.

A corpus of plaintext identifiers is embedded (hashed character 3-grams),
then split recursively into ``k`` clusters until a set holds at most ``c``
items, whose members receive ordinals ``0..``. An item's semantic ID is the
root-first list of cluster indices followed by its ordinal; each digit maps
to token ``base + digit``. Cluster sizes are capped at ``ceil(size / k)``,
which bounds ID length by ``ceil(log_k(n / c)) + 1``.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._binio import Reader, Writer, check_header
from .errors import ConfigError, FormatError, TrieError
from .model import N_RESERVED

TRIE_MAGIC = b"EGTT"
TRIE_VERSION = 1
_NO_PARENT = 0xFFFFFFFF
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
KMEANS_ITERS = 25
KMEANS_RESTARTS = 4
# word-boundary marker so strings sharing a prefix or suffix share 3-grams
_BOUNDARY = "\x00"


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def read_corpus(path) -> list[str]:
    """One identifier per line, blank lines skipped, duplicates dropped (first kept)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return dedupe([ln.strip() for ln in lines if ln.strip()])


def dedupe(items: Sequence[str]) -> list[str]:
    return list(dict.fromkeys(items))


def embed_corpus(corpus: Sequence[str], dim: int = 64) -> np.ndarray:
    """L2-normalized term frequencies of hashed character 3-grams, ``[n, dim]``.

    Strings are wrapped in a boundary marker before n-gram extraction. Strings
    shorter than three characters get the constant row ``1 / sqrt(dim)``.
    """
    if dim < 16:
        raise ConfigError("embedding dim must be >= 16")
    if len(corpus) == 0:
        raise ConfigError("empty corpus")
    out = np.zeros((len(corpus), dim), dtype=np.float64)
    for i, text in enumerate(corpus):
        if len(text) < 3:
            out[i] = 1.0 / math.sqrt(dim)
            continue
        padded = _BOUNDARY + text + _BOUNDARY
        grams = [padded[j:j + 3] for j in range(len(padded) - 2)]
        for gram, count in Counter(grams).items():
            out[i, fnv1a_64(gram.encode("utf-8")) % dim] += count
        out[i] /= np.linalg.norm(out[i])
    return out


# ---------------------------------------------------------------------------
# clustering


def _kmeans_pp(x, k, rng):
    n = len(x)
    centers = [int(rng.integers(n))]
    d2 = ((x - x[centers[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            unused = [i for i in range(n) if i not in centers]
            nxt = unused[0]
        else:
            nxt = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            nxt = min(nxt, n - 1)
        centers.append(nxt)
        d2 = np.minimum(d2, ((x - x[nxt]) ** 2).sum(axis=1))
    return x[centers].copy()


def _sq_dists(x, centers):
    return ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)


def _balanced_assign(dist, cap):
    """Greedy nearest-first assignment with at most ``cap`` points per cluster."""
    n, k = dist.shape
    flat = dist.ravel()
    pts = np.repeat(np.arange(n), k)
    cls = np.tile(np.arange(k), n)
    order = np.lexsort((cls, pts, flat))
    labels = np.full(n, -1, dtype=np.int64)
    sizes = np.zeros(k, dtype=np.int64)
    left = n
    for j in order:
        p, c = pts[j], cls[j]
        if labels[p] < 0 and sizes[c] < cap:
            labels[p] = c
            sizes[c] += 1
            left -= 1
            if not left:
                break
    return labels


def _lloyd(x, k_eff, rng):
    n = len(x)
    centers = _kmeans_pp(x, k_eff, rng)
    labels = None
    for _ in range(KMEANS_ITERS):
        dist = _sq_dists(x, centers)
        new = np.argmin(dist, axis=1)  # first minimum: ties go to the lower index
        for c in range(k_eff):
            if not np.any(new == c):
                far = int(np.argmax(dist[np.arange(n), new]))
                centers[c] = x[far]
                new[far] = c
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(k_eff):
            if np.any(labels == c):
                centers[c] = x[labels == c].mean(axis=0)
    return centers


def balanced_kmeans(x: np.ndarray, k: int, seed) -> np.ndarray:
    """Cluster labels in ``[0, k)`` with no cluster larger than ``ceil(n / k)``.

    Runs ``KMEANS_RESTARTS`` seeded k-means++ starts and keeps the capped
    assignment with the lowest inertia (first one on ties).
    """
    rng = np.random.default_rng(seed)
    n = len(x)
    k_eff = min(k, n)
    best, best_inertia = None, np.inf
    for _ in range(KMEANS_RESTARTS):
        dist = _sq_dists(x, _lloyd(x, k_eff, rng))
        labels = _balanced_assign(dist, -(-n // k))
        inertia = dist[np.arange(n), labels].sum()
        if inertia < best_inertia - 1e-12:
            best, best_inertia = labels, inertia
    return best


def cluster_ids(embeddings: np.ndarray, k: int = 10, c: int = 10, seed: int = 0) -> list[tuple[int, ...]]:
    """Semantic ID digits for every row of ``embeddings``."""
    if k < 2:
        raise ConfigError("k must be >= 2")
    if c < 1:
        raise ConfigError("c must be >= 1")
    x = np.asarray(embeddings, dtype=np.float64)
    ids: list[tuple[int, ...] | None] = [None] * len(x)

    def recurse(members: np.ndarray, prefix: tuple[int, ...]) -> None:
        if len(members) <= c:
            for ordinal, item in enumerate(members):
                ids[item] = prefix + (ordinal,)
            return
        labels = balanced_kmeans(x[members], k, [seed, len(prefix), *prefix])
        for digit in range(k):
            sub = members[labels == digit]
            if len(sub):
                recurse(sub, prefix + (digit,))

    recurse(np.arange(len(x)), ())
    return ids


def ids_to_tokens(ids, base: int = N_RESERVED) -> list[tuple[int, ...]]:
    return [tuple(base + d for d in digits) for digits in ids]


def id_length_bound(n: int, k: int, c: int) -> int:
    """Largest possible ID length (cluster digits plus ordinal)."""
    levels = 0
    size = n
    while size > c:
        size = -(-size // k)
        levels += 1
    return levels + 1


# ---------------------------------------------------------------------------
# prefix tree


@dataclass
class PrefixTrie:
    """Nodes in depth-first preorder, children visited in ascending token order.

    Node 0 is the root (token 0, parent -1). ``payload`` is the corpus index
    at leaves and -1 elsewhere.
    """

    tokens: np.ndarray
    parents: np.ndarray
    payloads: np.ndarray
    depths: np.ndarray = field(init=False)
    children: list[list[int]] = field(init=False, repr=False)
    child_of: list[dict[int, int]] = field(init=False, repr=False)
    heights: np.ndarray = field(init=False, repr=False)
    leaf_counts: np.ndarray = field(init=False, repr=False)
    sizes: np.ndarray = field(init=False, repr=False)  # descendants, excluding the node

    def __post_init__(self) -> None:
        n = len(self.tokens)
        if n == 0 or self.parents[0] != -1:
            raise TrieError("trie must have exactly one root at index 0")
        self.depths = np.zeros(n, dtype=np.int64)
        self.children = [[] for _ in range(n)]
        for i in range(1, n):
            p = int(self.parents[i])
            if not 0 <= p < i:
                raise TrieError(f"node {i}: parent {p} does not precede it")
            self.children[p].append(i)
            self.depths[i] = self.depths[p] + 1
        self.child_of = []
        for i, kids in enumerate(self.children):
            toks = [int(self.tokens[j]) for j in kids]
            if toks != sorted(set(toks)):
                raise TrieError(f"node {i}: children tokens not unique and ascending")
            self.child_of.append(dict(zip(toks, kids)))
            if not kids and self.payloads[i] < 0 and i != 0:
                raise TrieError(f"leaf {i} carries no payload")
        self.heights = np.zeros(n, dtype=np.int64)
        self.leaf_counts = np.zeros(n, dtype=np.int64)
        self.sizes = np.zeros(n, dtype=np.int64)
        for i in range(n - 1, -1, -1):
            if not self.children[i]:
                self.leaf_counts[i] = 1 if i else 0
            p = int(self.parents[i])
            if p >= 0:
                self.heights[p] = max(self.heights[p], self.heights[i] + 1)
                self.leaf_counts[p] += self.leaf_counts[i]
                self.sizes[p] += self.sizes[i] + 1

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PrefixTrie):
            return NotImplemented
        return (np.array_equal(self.tokens, other.tokens) and np.array_equal(self.parents, other.parents)
                and np.array_equal(self.payloads, other.payloads))

    @property
    def n_leaves(self) -> int:
        return int(self.leaf_counts[0])

    def is_leaf(self, node: int) -> bool:
        return not self.children[node]

    def path_tokens(self, node: int) -> tuple[int, ...]:
        out = []
        while node > 0:
            out.append(int(self.tokens[node]))
            node = int(self.parents[node])
        return tuple(reversed(out))

    def leaves(self) -> list[int]:
        return [i for i in range(1, len(self)) if not self.children[i]]

    def leaves_under(self, node: int) -> list[int]:
        stack, out = [node], []
        while stack:
            i = stack.pop()
            if not self.children[i]:
                out.append(i)
            stack.extend(reversed(self.children[i]))
        return out


def build_trie(sequences: Sequence[Sequence[int]]) -> PrefixTrie:
    """Prefix tree over token sequences; leaf payload = index into ``sequences``."""
    root: dict = {}
    for idx, seq in enumerate(sequences):
        if len(seq) == 0:
            raise TrieError(f"ID {idx} is empty")
        node = root
        for tok in seq:
            if "payload" in node:
                raise TrieError(f"ID {idx} extends ID {node['payload']}")
            node = node.setdefault(int(tok), {})
        if "payload" in node:
            raise TrieError(f"duplicate ID {tuple(seq)} (items {node['payload']} and {idx})")
        if len(node):
            raise TrieError(f"ID {idx} is a prefix of another ID")
        node["payload"] = idx
    tokens, parents, payloads = [0], [-1], [-1]

    def visit(node: dict, me: int) -> None:
        for tok in sorted(t for t in node if t != "payload"):
            child = node[tok]
            tokens.append(tok)
            parents.append(me)
            payloads.append(child.get("payload", -1))
            visit(child, len(tokens) - 1)

    visit(root, 0)
    return PrefixTrie(np.array(tokens, dtype=np.int64), np.array(parents, dtype=np.int64),
                      np.array(payloads, dtype=np.int64))


def build_from_corpus(corpus: Sequence[str], k: int = 10, c: int = 10, seed: int = 0,
                      dim: int = 64, base: int = N_RESERVED) -> tuple[list[str], list[tuple[int, ...]], PrefixTrie]:
    """Deduplicate, embed, cluster and build; returns (items, token IDs, trie)."""
    items = dedupe(corpus)
    ids = ids_to_tokens(cluster_ids(embed_corpus(items, dim), k, c, seed), base)
    return items, ids, build_trie(ids)


def subtree(trie: PrefixTrie, path: Sequence[int]) -> int | None:
    """Node reached by following ``path`` from the root, or None."""
    node = 0
    for tok in path:
        node = trie.child_of[node].get(int(tok))
        if node is None:
            return None
    return node


@dataclass
class TrieStats:
    nodes_per_depth: list[int]
    mean_branching: list[float]  # mean out-degree of internal nodes, per depth
    leaf_count: int
    max_depth: int


def trie_stats(trie: PrefixTrie) -> TrieStats:
    max_depth = int(trie.depths.max())
    nodes = np.bincount(trie.depths, minlength=max_depth + 1)
    branching = []
    for d in range(max_depth):
        degs = [len(trie.children[i]) for i in np.nonzero(trie.depths == d)[0] if trie.children[i]]
        branching.append(float(np.mean(degs)) if degs else 0.0)
    return TrieStats([int(v) for v in nodes], branching, trie.n_leaves, max_depth)


# ---------------------------------------------------------------------------
# files


def trie_to_bytes(trie: PrefixTrie) -> bytes:
    out = Writer()
    out.raw(TRIE_MAGIC)
    out.pack("I", TRIE_VERSION)
    out.pack("I", len(trie))
    for tok, par, pay in zip(trie.tokens, trie.parents, trie.payloads):
        out.pack("IIq", int(tok), _NO_PARENT if par < 0 else int(par), int(pay))
    return out.getvalue()


def trie_from_bytes(data: bytes) -> PrefixTrie:
    r = Reader(data)
    check_header(r, TRIE_MAGIC, TRIE_VERSION)
    (n,) = r.unpack("I", "node count")
    tokens = np.empty(n, dtype=np.int64)
    parents = np.empty(n, dtype=np.int64)
    payloads = np.empty(n, dtype=np.int64)
    for i in range(n):
        tok, par, pay = r.unpack("IIq", f"node {i}")
        tokens[i], parents[i], payloads[i] = tok, -1 if par == _NO_PARENT else par, pay
    if r.remaining():
        raise FormatError(f"{r.remaining()} trailing bytes after node table")
    try:
        return PrefixTrie(tokens, parents, payloads)
    except TrieError as exc:
        raise FormatError(f"invalid node table: {exc}") from exc


def save_trie(trie: PrefixTrie, path) -> None:
    Path(path).write_bytes(trie_to_bytes(trie))


def load_trie(path) -> PrefixTrie:
    return trie_from_bytes(Path(path).read_bytes())


def dump_text(trie: PrefixTrie, items: Sequence[str] | None = None) -> str:
    lines = []
    for i in range(len(trie)):
        indent = "  " * int(trie.depths[i])
        if i == 0:
            lines.append(f"root leaves={trie.n_leaves}")
            continue
        line = f"{indent}token={int(trie.tokens[i])}"
        if trie.payloads[i] >= 0:
            line += f" payload={int(trie.payloads[i])}"
            if items is not None:
                line += f" item={items[int(trie.payloads[i])]!r}"
        else:
            line += f" leaves={int(trie.leaf_counts[i])}"
        lines.append(line)
    return "\n".join(lines) + "\n"


def debug_dump(trie: PrefixTrie, path, items: Sequence[str] | None = None) -> None:
    Path(path).write_text(dump_text(trie, items), encoding="utf-8")
