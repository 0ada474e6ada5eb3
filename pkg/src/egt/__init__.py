"""Compressed transformer inference with prefix-tree parallel verification.

Modules:

- :mod:`egt.model` toy decoder-only transformer, calibration statistics, EGTM files
- :mod:`egt.quant` adaptive group-wise INT4 quantization
- :mod:`egt.prune` element importance and layer-adaptive N:M pruning
- :mod:`egt.compress` the compression pipeline and EGTQ files
- :mod:`egt.kernel` 2bit-CSR packing and sparse GEMV
- :mod:`egt.bench` GEMV micro-benchmark
- :mod:`egt.trie` semantic IDs and the prefix tree
- :mod:`egt.decoding` constrained beam search and tree verification
- :mod:`egt.recall` baseline-relative recall
"""

__version__ = "0.1.0"
