"""
Pruning and INT4 quantization of one model
==========================================

Score every weight, choose 2:4 or 1:4 per layer from its importance, then
quantize what is left with finer groups on the sensitive output channels.
"""

import numpy as np

from egt.compress import compress_model, materialize
from egt.model import ModelConfig, forward, init_random, random_batch
from egt.prune import importance_scores, prune_nm
from egt.quant import GroupQuantSpec, dequantize, quantize_matrix

# the element score on a tiny matrix
W = np.array([[0.5, -2.0, 0.1, 1.0]])
scores = importance_scores(W, x_norms=np.array([1.0, 3.0, 1.0, 0.2]), grads=np.array([[0.1, 0.5, 0.0, 0.3]]))
print("scores", scores)
print("2:4 keep", prune_nm(scores, 2))

# four values on the INT4 grid come back exactly
q = quantize_matrix(np.array([[0.0, 1.0, 2.0, 3.0]]), GroupQuantSpec.uniform(1, 4))
print("codes", q.codes, "scale %.3f" % q.scales[0], "dequant", dequantize(q))

config = ModelConfig(d_model=128, d_ff=256, seed=1)
model = init_random(config)
batch = random_batch(config, 8, 16, seed=1)
cm = compress_model(model, batch, rho_q=0.5, rho_s=0.5)

for name, layer in cm.layers.items():
    fine = int((layer.quant.spec.group_sizes == 64).sum())
    print("%-18s %s  fine channels %3d / %d" % (name, ["dense", "1:4", "2:4"][layer.pattern], fine, layer.shape[0]))

# how far the compressed model drifts on one prompt
small = materialize(model, cm)
a, b = forward(model, [1, 5, 9])[-1], forward(small, [1, 5, 9])[-1]
print("top token baseline %d, compressed %d" % (a.argmax(), b.argmax()))
print("artifact sha256", cm.digest()[:16])
