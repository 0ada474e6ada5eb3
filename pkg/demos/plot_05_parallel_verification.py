"""
Constrained beam search with one-pass verification
==================================================

Step through the trie while a cost model says stepping is cheaper, then
score the whole remaining subtree in a single forward pass.
"""

from importlib import resources

from egt.decoding import CostModel, DecodeSession, build_tree_mask, decode, flatten_subtree, profile_cost_model
from egt.model import ModelConfig, init_random
from egt.recall import make_queries
from egt.trie import build_from_corpus, read_corpus

config = ModelConfig(d_model=64, d_ff=128, seed=3)
model = init_random(config)
items, ids, trie = build_from_corpus(read_corpus(resources.files("egt") / "data" / "demo_corpus.txt"), seed=3)
prompt = make_queries(config, 1, 4, seed=3)[0]

# what one verification pass looks like at the root
session = DecodeSession.start(prompt)
flat = flatten_subtree(session, trie)
tm = build_tree_mask(flat, session)
print("flattened nodes", len(flat), "sequence length", len(tm.tokens))

ar = decode(model, trie, prompt, beam_size=20, mode="autoregressive")
print("autoregressive: passes", ar.forward_passes)

# fit the cost model from real timings on this machine
cm = profile_cost_model(model, trie, make_queries(config, 3, 4, seed=4), beam_size=20)
print("t_step %.2e s, alpha %.2e s/node, beta %.2e s" % (cm.t_step, cm.alpha, cm.beta))

pv = decode(model, trie, prompt, beam_size=20, mode="ptpv", cost_model=cm)
print("ptpv: passes", pv.forward_passes, "trigger at step", pv.trigger_step)

# in units of one step, verification is cheap enough to fire at once
pv0 = decode(model, trie, prompt, beam_size=20, mode="ptpv", cost_model=CostModel(1.0, 0.002, 1.0))
print("ptpv (unit costs): passes", pv0.forward_passes)

same = [h.tokens for h in ar.hypotheses[:5]] == [h.tokens for h in pv0.hypotheses[:5]]
print("top 5 agree with stepwise search:", same)
for h in pv0.hypotheses[:5]:
    print("%8.4f %s" % (h.score, items[h.payload(trie)]))
