"""Attention-correlation dynamics of one-layer softmax ViTs.

Synthetic clustered-patch data, masked-reconstruction and contrastive
objectives with analytic gradients, independent oracles, phase tracking and
an experiment command line.
"""

__version__ = "0.1.0"
