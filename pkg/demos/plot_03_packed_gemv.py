"""
Packed 2-bit indices and the sparse GEMV
========================================

Each kept weight stores only its position inside a block of four, packed
eight to a 16-bit word from the top bits down.
"""

import numpy as np

from egt.bench import bench_spmv, speedups
from egt.kernel import footprint, iter_word, pack, spmv
from egt.prune import prune_nm
from egt.quant import GroupQuantSpec, quantize_matrix

mask = np.zeros((1, 8), bool)
mask[0, [1, 3, 4, 6]] = True
p = pack(mask, np.ones((1, 8), np.float32), 2)
print("index word 0x%04X" % p.index_words[0])
print("decoded", list(iter_word(int(p.index_words[0])))[:4])

# a quantized 2:4 matrix and its size against plain CSR
rng = np.random.default_rng(0)
W = rng.standard_normal((256, 512)).astype(np.float32)
mask = prune_nm(np.abs(W), 2)
packed = pack(mask, quantize_matrix(W, GroupQuantSpec.uniform(256, 64), mask), 2)
rep = footprint(packed)
print("packed %d B, csr %d B, ratio %.3f" % (rep.packed_bytes, rep.baseline_csr_bytes, rep.ratio))

x = rng.standard_normal(512).astype(np.float32)
y = spmv(packed, x)
print("y[:4]", np.round(y[:4], 4))

# timings are this machine's numpy, not a GPU kernel
rows = bench_spmv([(512, 512)], repetitions=30)
for r in rows:
    print("%-12s median %8.0f ns  bytes %7d" % (r.variant, r.median_ns, r.bytes))
for key, s in speedups(rows).items():
    print(key[2], "x%.2f" % s)
