"""
A toy decoder and its calibration statistics
============================================

Build a small seeded transformer, run it, and collect the activation norms
and gradients that the pruning criterion uses later.
"""

import numpy as np

from egt.model import ModelConfig, calibrate, causal_mask, forward, init_random, random_batch

config = ModelConfig(vocab_size=64, d_model=32, n_layers=2, n_heads=4, d_ff=64, seed=0)
model = init_random(config)
print("linear layers:", len(model.linear_names()))

# logits for every position of a short sequence
tokens = [1, 17, 42, 9]
logits = forward(model, tokens)
print("logits shape", logits.shape)

# a custom mask: the last token is a sibling of the third, so it must not see it
mask = causal_mask(4)
mask[3, 2] = False
tree = forward(model, tokens, mask, positions=[0, 1, 2, 2])
alone = forward(model, [1, 17, 9])[-1]
print("sibling row equals its own causal run:", np.allclose(tree[3], alone, atol=1e-5))

# calibration: per-column input norms and mean absolute gradients
batch = random_batch(config, n_sequences=8, length=16, seed=0)
trace = calibrate(model, batch)
print("calibration loss %.4f" % trace.loss)
for name in model.linear_names()[:3]:
    print(name, "x_norm mean %.3f" % trace.x_norms[name].mean(), "grad mean %.2e" % trace.grads[name].mean())
