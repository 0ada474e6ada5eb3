"""
Semantic IDs and the prefix tree
================================

Cluster a corpus of identifiers recursively, give every item the path of
cluster digits that leads to it, and index those paths in a trie.
"""

from importlib import resources

from egt.trie import build_from_corpus, dump_text, read_corpus, trie_stats

corpus = read_corpus(resources.files("egt") / "data" / "demo_corpus.txt")
print(len(corpus), "items, e.g.", corpus[:3])

items, ids, trie = build_from_corpus(corpus, k=10, c=10, seed=7)
for item, tid in list(zip(items, ids))[:5]:
    print("%-28s %s" % (item, tid))

stats = trie_stats(trie)
print("nodes per depth", stats.nodes_per_depth)
print("mean branching", [round(b, 2) for b in stats.mean_branching])

# items sharing the first digit
first = ids[0][0]
print("same top cluster as", repr(items[0]), [it for it, t in zip(items, ids) if t[0] == first][:8])

print(dump_text(trie, items)[:400])
