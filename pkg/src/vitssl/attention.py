"""Softmax attention, the trainable matrix Q and correlation observables.

The feature-position (FP) correlation ``Phi[p, k, m] = e_p^T Q v_{k,m}`` and
the position-position (PP) correlation ``Ups[p, q] = e_p^T Q e_q`` are read
off Q by exact inner products with the stored bases. Since the bases are
standard-basis blocks these are plain slices of the position rows of Q.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .data import DataSpec, MaskedSample

__all__ = [
    "DivergenceError",
    "softmax_rows",
    "AttentionWeights",
    "AttentionProfile",
    "CorrelationSnapshot",
    "mae_scores",
    "cl_scores",
    "extract_correlations",
    "area_attention",
    "CORRELATION_CSV_SCHEMA",
    "CORRELATION_CSV_FIELDS",
]

DIVERGENCE_LIMIT = 1e6


class DivergenceError(FloatingPointError):
    """Non-finite attention logits or a runaway weight matrix."""


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax along the last axis with max-subtraction."""
    logits = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(logits)):
        raise DivergenceError("non-finite attention logits; reduce the learning rate")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class AttentionWeights:
    """The merged query-key matrix Q together with its data description."""

    Q: np.ndarray
    spec: DataSpec
    step: int = 0

    @classmethod
    def zeros(cls, spec: DataSpec) -> "AttentionWeights":
        return cls(np.zeros((spec.dim, spec.dim)), spec, 0)

    @property
    def position_rows(self) -> np.ndarray:
        """View of the rows ``e_p^T Q`` (shape (P, d))."""
        return self.Q[self.spec.num_features :]

    def check_finite(self) -> None:
        if not np.all(np.isfinite(self.Q)) or np.max(np.abs(self.Q), initial=0.0) > DIVERGENCE_LIMIT:
            raise DivergenceError(f"weights diverged at step {self.step}")


@dataclass(frozen=True)
class AttentionProfile:
    """Attention rows of one input plus their area aggregates.

    ``scores[p, q]`` is the softmax weight from query p to key q.
    ``area_scores[p, a]`` sums the row over area ``a`` of the input's
    cluster; ``unmasked_area_attn[p, a]`` sums it over the unmasked patches
    of that area only.
    """

    scores: np.ndarray
    area_scores: np.ndarray
    unmasked_area_attn: np.ndarray


def area_attention(scores: np.ndarray, area_of: np.ndarray, num_areas: int, keep: np.ndarray | None = None) -> np.ndarray:
    """Sum attention rows over each area, optionally over kept keys only."""
    onehot = (area_of[:, None] == np.arange(num_areas)[None, :]).astype(float)
    if keep is not None:
        onehot = onehot * keep[:, None]
    return scores @ onehot


def _profile(scores: np.ndarray, spec: DataSpec, cluster: int, unmasked: np.ndarray) -> AttentionProfile:
    area_of = spec.area_index[cluster]
    return AttentionProfile(
        scores=scores,
        area_scores=area_attention(scores, area_of, spec.num_areas),
        unmasked_area_attn=area_attention(scores, area_of, spec.num_areas, unmasked),
    )


def mae_scores(masked: MaskedSample, Q: np.ndarray) -> AttentionProfile:
    """MAE attention: both queries and keys are ``mask(X) + E``."""
    spec = masked.spec
    Xt = masked.contents + spec.position_basis()
    scores = softmax_rows(Xt @ Q @ Xt.T)
    return _profile(scores, spec, masked.cluster, masked.unmasked)


def cl_scores(contents: np.ndarray, Q: np.ndarray, spec: DataSpec, cluster: int, unmasked: np.ndarray | None = None) -> AttentionProfile:
    """Contrastive attention: query ``e_p``, key ``X_q`` (no positional term)."""
    E = spec.position_basis()
    scores = softmax_rows(E @ Q @ np.asarray(contents).T)
    if unmasked is None:
        unmasked = np.ones(spec.num_patches, dtype=bool)
    return _profile(scores, spec, cluster, unmasked)


# ---------------------------------------------------------------------------
# Correlations
# ---------------------------------------------------------------------------

CORRELATION_CSV_SCHEMA = 1
CORRELATION_CSV_FIELDS = (
    "schema",
    "step",
    "patch",
    "cluster",
    "area",
    "phi_global",
    "phi_target",
    "phi_other_max",
    "ups_self",
    "ups_area_mean",
    "ups_offarea_mean",
    "ups_cluster_area_mean",
    "ups_cluster_offarea_mean",
)


@dataclass
class CorrelationSnapshot:
    """FP and PP correlations at one step.

    fp: (P, K, N) with ``fp[p, k, m] = e_p^T Q v_{k,m}``.
    pp: (P, P) with ``pp[p, q] = e_p^T Q e_q``.
    pp_by_cluster: (K, P, P) per-cluster accumulated PP pieces, or None when
        the caller does not track them.
    """

    step: int
    fp: np.ndarray
    pp: np.ndarray
    pp_by_cluster: np.ndarray | None = None

    def csv_rows(self, spec: DataSpec, patches: Iterable[int]) -> list[tuple]:
        """Aggregated rows for the correlation trace file."""
        rows = []
        N = spec.num_areas
        for p in patches:
            for k in range(spec.num_clusters):
                n = spec.area_of(k, p)
                phis = self.fp[p, k]
                others = [phis[m] for m in range(N) if m not in (0, n)]
                same = spec.area_index[k] == n
                same_other = same.copy()
                same_other[p] = False
                row_pp = self.pp[p]
                ups_area = float(row_pp[same_other].mean()) if same_other.any() else 0.0
                ups_off = float(row_pp[~same].mean())
                if self.pp_by_cluster is not None:
                    rk = self.pp_by_cluster[k, p]
                    kc_area = float(rk[same_other].mean()) if same_other.any() else 0.0
                    kc_off = float(rk[~same].mean())
                else:
                    kc_area = kc_off = float("nan")
                rows.append(
                    (
                        CORRELATION_CSV_SCHEMA,
                        self.step,
                        p,
                        k,
                        n,
                        float(phis[0]),
                        float(phis[n]),
                        float(max(others)) if others else float("nan"),
                        float(row_pp[p]),
                        ups_area,
                        ups_off,
                        kc_area,
                        kc_off,
                    )
                )
        return rows


def extract_correlations(Q: np.ndarray, spec: DataSpec, step: int = 0, pp_by_cluster: np.ndarray | None = None) -> CorrelationSnapshot:
    """Read FP and PP correlations from Q by inner products with the bases."""
    E = spec.position_basis()
    V = spec.feature_basis().reshape(spec.num_features, spec.dim)
    rows = E @ Q
    fp = (rows @ V.T).reshape(spec.num_patches, spec.num_clusters, spec.num_areas)
    pp = rows @ E.T
    return CorrelationSnapshot(step, fp, pp, None if pp_by_cluster is None else pp_by_cluster.copy())
