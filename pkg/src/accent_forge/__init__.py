"""Accent identification from i-vectors with twin (Siamese) networks.

Pipeline stages live in their own modules: ``ubm`` (background GMM), ``tvm``
(total variability model and i-vector extraction), ``nnet`` (numpy
networks), ``accentid`` (twin network, scoring strategies, baselines),
``evaluation`` (metrics and fusion), ``synth`` (synthetic corpus) and
``cli``.
"""

__version__ = "0.1.0"
