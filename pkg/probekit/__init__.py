"""
probekit
--------
Linear classifier probes for looking inside neural networks:
  - numpy tensors with reverse-mode gradients and a splitmix64 Rng
  - layer graphs (MLPs, a small MNIST convnet) with auxiliary heads and skip bridges
  - gradient-isolated probes trained on frozen checkpoints
  - exact conditional entropies along Markov chains
  - scenario driver, checkpoint files, CSV/JSON records and SVG layer curves
"""

from . import logs  # noqa: F401

__all__ = ["tensor", "graph", "probe", "entropy", "datasets", "experiments", "report", "models"]
__version__ = "0.1.0"
