from __future__ import annotations

from typing import NamedTuple

import numpy as np


class KernelResult(NamedTuple):
    """Weighted batch sums returned by the masked-query MAE kernel.

    loss: (P,) per-patch weighted loss sums.
    grad: (P, d) descent direction on the position rows of Q.
    pp_by_cluster: (K, P, P) split of the position-position block of
        ``grad`` by the cluster of the contributing sample, or None.
    own_attn: (B, P) unmasked attention of each masked query to its own
        area; NaN for unmasked patches.
    """

    loss: np.ndarray
    grad: np.ndarray
    pp_by_cluster: np.ndarray | None
    own_attn: np.ndarray
