"""Few-shot fine-grained recognition with pairwise alignment bilinear pooling.

Subpackages: ``pabn.autodiff`` (numpy reverse-mode engine), ``pabn.data``
(PPM decoding, splits, episodes, synthetic data). Modules: ``pabn.model``,
``pabn.train`` and ``pabn.cli``.
"""

__version__ = "0.1.0"
