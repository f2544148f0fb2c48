"""Cross-domain (visible/thermal) face identification with residual feature mapping.

Subpackages and modules:

- ``tensor``: tape-based reverse-mode autodiff, optimizers, PCA, tensor files
- ``imageproc``: landmark alignment, DoG preprocessing, PGM I/O
- ``networks``: truncated trunks, compression, RST, heads, baselines
- ``losses``: cross-entropy family and the DPM regression loss
- ``training``: pretraining, alternating adaptation, DPM fitting
- ``evaluation``: enrollment, cosine scoring, CMC curves
- ``synthdata``: seeded synthetic paired-domain faces and manifests
- ``protocol``: gallery/probe protocol runs and the ablation harness
- ``cli``: the ``xdomid`` command
"""

__version__ = "0.1.0"
