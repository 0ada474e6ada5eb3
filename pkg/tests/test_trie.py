import math
import random
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egt.errors import BadMagicError, ConfigError, FormatError, TrieError, TruncatedFileError
from egt.trie import (
    build_from_corpus,
    build_trie,
    cluster_ids,
    debug_dump,
    dedupe,
    embed_corpus,
    fnv1a_64,
    id_length_bound,
    load_trie,
    read_corpus,
    save_trie,
    subtree,
    trie_from_bytes,
    trie_stats,
    trie_to_bytes,
)

from conftest import random_corpus

GOLDEN = Path(__file__).parent / "golden"


def test_fnv_reference_vectors():
    assert fnv1a_64(b"") == 0xCBF29CE484222325
    assert fnv1a_64(b"a") == 0xAF63DC4C8601EC8C


def test_embedding_rows():
    emb = embed_corpus(["abc", "abd", "xyz", "abc", "ab"], 64)
    assert np.array_equal(emb[0], emb[3])
    assert np.allclose(np.linalg.norm(emb[:4], axis=1), 1.0, atol=1e-6)
    assert np.allclose(emb[4], 1 / 8)
    assert emb[0] @ emb[1] > emb[0] @ emb[2]


def test_embedding_errors():
    with pytest.raises(ConfigError):
        embed_corpus([], 64)
    with pytest.raises(ConfigError):
        embed_corpus(["abc"], 8)


def test_read_corpus_dedupes(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("b\na\n\nb\nc\n", encoding="utf-8")
    assert read_corpus(p) == ["b", "a", "c"]
    assert dedupe(["x", "y", "x"]) == ["x", "y"]


def test_small_corpus_single_ordinal():
    ids = cluster_ids(embed_corpus(["aaa", "bbb", "ccc"]), k=2, c=5)
    assert ids == [(0,), (1,), (2,)]


def test_cluster_errors():
    with pytest.raises(ConfigError):
        cluster_ids(np.ones((3, 16)), k=1)
    with pytest.raises(ConfigError):
        cluster_ids(np.ones((3, 16)), c=0)


def test_hundred_items_length_bound():
    corpus = random_corpus(random.Random(0), 100)
    _, ids, trie = build_from_corpus(corpus, k=10, c=10, seed=3)
    assert max(len(i) for i in ids) <= 3
    assert id_length_bound(100, 10, 10) == 2


def test_id_length_bound_matches_log_formula():
    for n in range(1, 3000, 37):
        for k in (2, 3, 10):
            for c in (1, 4, 10):
                formula = math.ceil(math.log(n / c, k) - 1e-12) + 1 if n > c else 1
                assert id_length_bound(n, k, c) <= formula


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 300), st.integers(2, 6), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_ids_unique_and_bijective(n, k, c, seed):
    corpus = random_corpus(random.Random(seed), n)
    items, ids, trie = build_from_corpus(corpus, k=k, c=c, seed=seed)
    assert len(set(ids)) == len(items)
    assert sorted(int(trie.payloads[l]) for l in trie.leaves()) == list(range(len(items)))
    for leaf in trie.leaves():
        assert trie.path_tokens(leaf) == ids[trie.payloads[leaf]]
    assert trie_stats(trie).max_depth <= math.ceil(math.log(n / c, k)) + 2 if n > c else True
    assert max(len(i) for i in ids) <= id_length_bound(n, k, c)
    assert all(len(kids) <= max(k, c) for kids in trie.children)


def test_rebuild_is_byte_identical():
    corpus = random_corpus(random.Random(5), 500)
    a = trie_to_bytes(build_from_corpus(corpus, k=4, c=6, seed=9)[2])
    b = trie_to_bytes(build_from_corpus(corpus, k=4, c=6, seed=9)[2])
    assert a == b


def test_hand_built_trie():
    trie = build_trie([[0, 1], [0, 2], [3, 0]])
    assert len(trie.children[0]) == 2
    assert len(trie.children[subtree(trie, [0])]) == 2
    assert subtree(trie, []) == 0
    assert subtree(trie, [3, 9]) is None
    assert trie.n_leaves == 3
    assert trie_stats(trie).nodes_per_depth == [1, 2, 3]
    assert trie_stats(trie).mean_branching == [2.0, 1.5]


def test_single_id_branching_one():
    stats = trie_stats(build_trie([[4, 5, 6]]))
    assert stats.mean_branching == [1.0, 1.0, 1.0]
    assert stats.leaf_count == 1


def test_build_errors():
    with pytest.raises(TrieError, match="duplicate"):
        build_trie([[0, 1], [0, 1]])
    with pytest.raises(TrieError, match="prefix"):
        build_trie([[0, 1], [0]])
    with pytest.raises(TrieError):
        build_trie([[0], [0, 1]])


def test_golden_dump(tmp_path):
    out = tmp_path / "dump.txt"
    debug_dump(build_trie([[0, 1], [0, 2], [3, 0]]), out)
    assert out.read_text() == (GOLDEN / "trie3_dump.txt").read_text()


def test_save_load(tmp_path):
    _, _, trie = build_from_corpus(random_corpus(random.Random(1), 80), k=3, c=4)
    p = tmp_path / "t.egtt"
    save_trie(trie, p)
    assert load_trie(p) == trie
    assert trie_to_bytes(load_trie(p)) == p.read_bytes()


def test_corrupt_files():
    data = trie_to_bytes(build_trie([[0, 1], [0, 2], [3, 0]]))
    with pytest.raises(BadMagicError):
        trie_from_bytes(b"EGTX" + data[4:])
    with pytest.raises(TruncatedFileError, match="node"):
        trie_from_bytes(data[:-5])
    with pytest.raises(FormatError):
        trie_from_bytes(data + b"\x01")
    bad = bytearray(data)
    bad[12 + 16 * 2 + 4:12 + 16 * 2 + 8] = (7).to_bytes(4, "little")  # parent index after the node itself
    with pytest.raises(FormatError):
        trie_from_bytes(bytes(bad))


def test_leaf_counts_non_increasing_along_paths():
    _, _, trie = build_from_corpus(random_corpus(random.Random(2), 300), k=3, c=5)
    for leaf in trie.leaves():
        node, counts = leaf, []
        while node >= 0:
            counts.append(int(trie.leaf_counts[node]))
            node = int(trie.parents[node])
        assert counts == sorted(counts)


def test_separable_corpus_root_degree_k():
    k, c = 4, 5
    stems = ["harborlights", "quickmarmot", "velvetzinnia", "gypsumforge"]
    corpus = [f"{stem} {tag}" for stem in stems for tag in ("a1", "b2", "c3", "d4", "e5")]
    for seed in range(5):
        _, ids, trie = build_from_corpus(corpus, k=k, c=c, seed=seed)
        assert len(trie.children[0]) == k
        # every root cluster is exactly one stem
        for kid in trie.children[0]:
            assert len({corpus[int(trie.payloads[l])].split()[0] for l in trie.leaves_under(kid)}) == 1
