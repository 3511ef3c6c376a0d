"""Backend selection for the hot MAE batch kernel.

The compiled extension is used when it was built; otherwise the numpy
implementation is used. Setting ``VITSSL_KERNEL=numpy`` forces the fallback.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_py
from ._kernels_common import KernelResult

try:  # pragma: no cover - depends on the build
    from . import _kernels_c
except ImportError:  # pragma: no cover - depends on the build
    _kernels_c = None

__all__ = ["BACKEND", "available_backends", "mae_masked_terms", "KernelResult"]


def available_backends() -> list[str]:
    return (["cython"] if _kernels_c is not None else []) + ["numpy"]


def _default_backend() -> str:
    forced = os.environ.get("VITSSL_KERNEL", "").strip().lower()
    if forced:
        if forced not in available_backends():
            raise RuntimeError(f"VITSSL_KERNEL={forced!r} is not available")
        return forced
    return available_backends()[0]


BACKEND = _default_backend()


def mae_masked_terms(
    W: np.ndarray,
    area_index: np.ndarray,
    num_areas: int,
    cluster: np.ndarray,
    z: np.ndarray,
    unmasked: np.ndarray,
    weight: np.ndarray,
    with_cluster_pp: bool = False,
    backend: str | None = None,
) -> KernelResult:
    """Weighted loss, descent direction and own-area attention for a batch.

    ``W`` is the (P, d) block of position rows of Q. See ``KernelResult``
    for the outputs.
    """
    backend = backend or BACKEND
    W = np.ascontiguousarray(W, dtype=np.float64)
    area_index = np.ascontiguousarray(area_index, dtype=np.int64)
    cluster = np.ascontiguousarray(cluster, dtype=np.int64)
    z = np.ascontiguousarray(z, dtype=np.float64)
    weight = np.ascontiguousarray(weight, dtype=np.float64)
    if backend == "cython":
        if _kernels_c is None:
            raise RuntimeError("compiled kernel is not built")
        um = np.ascontiguousarray(unmasked, dtype=np.uint8)
        return _kernels_c.mae_masked_terms(W, area_index, int(num_areas), cluster, z, um, weight, bool(with_cluster_pp))
    if backend == "numpy":
        um = np.ascontiguousarray(unmasked, dtype=bool)
        return _kernels_py.mae_masked_terms(W, area_index, int(num_areas), cluster, z, um, weight, bool(with_cluster_pp))
    raise ValueError(f"unknown backend {backend!r}")
