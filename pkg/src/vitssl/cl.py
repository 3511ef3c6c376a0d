"""Contrastive objective for the one-layer softmax ViT.

The representation of an input is the average over queries of the attention
output, where query ``p`` is the bare positional vector ``e_p`` and the keys
are the patch contents::

    F(X; Q) = (1/P) sum_p sum_q s_pq X_q,   s_pq = softmax_q(e_p^T Q X_q)

Only the position rows of Q enter the scores, so only those rows receive
gradient. The similarity between two inputs is the plain inner product of
their representations; the second argument is a stop-gradient branch, which
is honoured here as an analytic contract: ``cl_gradient`` differentiates
through the first view only.

Each anchor gets its own negatives, drawn by index from a pool of noisy
samples shared by the batch. Pooled representations are computed once per
pool member, which keeps the per-step cost linear in the batch size while
each anchor's negatives stay independent draws from the pool.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .attention import AttentionWeights, DivergenceError, softmax_rows
from .data import DataSpec, SpecError, iter_masks, mask_count, _random_unmasked

__all__ = [
    "ClBatch",
    "ClLossReport",
    "ClGradient",
    "default_temperature",
    "default_regularization",
    "default_noise",
    "cl_forward",
    "cl_similarity",
    "cl_loss",
    "cl_gradient",
    "lemma_alpha",
    "exact_cl_batch",
    "draw_cl_batch",
    "cl_step",
    "ClTrainer",
]

LEMMA_TOLERANCE = 1e-9
EXACT_MAX_PATCHES = 8


def default_temperature(dim: int) -> float:
    """Softmax temperature ``1 / ln d``."""
    return 1.0 / math.log(dim)


def default_regularization(num_patches: int) -> float:
    """Weight decay ``1 / (P ln P)``."""
    return 1.0 / (num_patches * math.log(num_patches))


def default_noise(dim: int) -> float:
    """Per-coordinate noise variance ``1 / d``."""
    return 1.0 / dim


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ClBatch:
    """Anchors with two masked views each, plus a pool of negatives.

    plus, plusplus: (B, P, d) contents of the two masked views.
    negatives: (S, P, d) unmasked contents of the negative pool.
    negative_index: (B, N_c) pool rows used as the negatives of each anchor.
    cluster: (B,) anchor clusters; negative_cluster: (S,) pool clusters.
    unmasked_plus, unmasked_plusplus: (B, P) masks of the two views.
    weight: (B,) probability weight of each anchor.
    """

    plus: np.ndarray
    plusplus: np.ndarray
    negatives: np.ndarray
    negative_index: np.ndarray
    cluster: np.ndarray
    negative_cluster: np.ndarray
    unmasked_plus: np.ndarray
    unmasked_plusplus: np.ndarray
    weight: np.ndarray

    def __post_init__(self) -> None:
        if self.negative_index.ndim != 2 or self.negative_index.shape[1] < 1:
            raise ValueError("contrastive batch needs at least one negative per anchor")

    def __len__(self) -> int:
        return int(self.cluster.shape[0])

    @property
    def num_negatives(self) -> int:
        return int(self.negative_index.shape[1])

    def subset(self, rows: np.ndarray) -> "ClBatch":
        return ClBatch(
            self.plus[rows],
            self.plusplus[rows],
            self.negatives,
            self.negative_index[rows],
            self.cluster[rows],
            self.negative_cluster,
            self.unmasked_plus[rows],
            self.unmasked_plusplus[rows],
            self.weight[rows] / self.weight[rows].sum(),
        )


def _clean_contents(spec: DataSpec, cluster: np.ndarray, z: np.ndarray) -> np.ndarray:
    B = cluster.shape[0]
    P = spec.num_patches
    area = spec.area_index[cluster]
    cols = cluster[:, None] * spec.num_areas + area
    X = np.zeros((B, P, spec.dim))
    X[np.arange(B)[:, None], np.arange(P)[None, :], cols] = np.take_along_axis(z, area, axis=1)
    return X


def _balanced_negatives(spec: DataSpec, count: int) -> tuple[np.ndarray, np.ndarray]:
    cluster = np.arange(count, dtype=np.int64) % spec.num_clusters
    z = np.full((count, spec.num_areas), spec.z_law.mean())
    return _clean_contents(spec, cluster, z), cluster


def exact_cl_batch(spec: DataSpec, ratio: float, num_negatives: int, cap: int = 100_000) -> ClBatch:
    """Every (cluster, latent node, mask pair) with noise off.

    The negatives are a fixed balanced set: negative ``s`` belongs to
    cluster ``s mod K`` and carries the mean latent in every area.
    """
    P = spec.num_patches
    if P > EXACT_MAX_PATCHES:
        raise SpecError(f"exact contrastive mode is limited to P <= {EXACT_MAX_PATCHES}")
    masks = np.array(list(iter_masks(P, mask_count(P, ratio))))
    M = masks.shape[0]
    nodes, wts = spec.z_law.quadrature()
    z_grid = np.array(list(itertools.product(nodes, repeat=spec.num_areas)))
    w_grid = np.prod(np.array(list(itertools.product(wts, repeat=spec.num_areas))), axis=1)
    K, Z = spec.num_clusters, z_grid.shape[0]
    rows = K * Z * M * M
    if rows > cap:
        raise SpecError(f"exact contrastive enumeration needs {rows} rows (cap {cap})")
    k_idx, z_idx, a_idx, b_idx = (g.ravel() for g in np.meshgrid(np.arange(K), np.arange(Z), np.arange(M), np.arange(M), indexing="ij"))
    cluster = k_idx.astype(np.int64)
    clean = _clean_contents(spec, cluster, z_grid[z_idx])
    um1, um2 = masks[a_idx], masks[b_idx]
    weight = w_grid[z_idx] / (K * M * M)
    negatives, neg_cluster = _balanced_negatives(spec, num_negatives)
    index = np.broadcast_to(np.arange(num_negatives), (rows, num_negatives))
    return ClBatch(clean * um1[:, :, None], clean * um2[:, :, None], negatives, index, cluster, neg_cluster, um1, um2, weight)


def draw_cl_batch(
    spec: DataSpec,
    size: int,
    ratio: float,
    noise: float,
    num_negatives: int,
    rng: np.random.Generator,
    pool_size: int | None = None,
) -> ClBatch:
    """Monte Carlo batch: noisy anchors under two independent masks.

    Negatives are noisy samples without masking. Each anchor draws its
    ``num_negatives`` uniformly with replacement from a pool of
    ``pool_size`` fresh samples (default ``max(2 * size, 16 * num_negatives)``).
    """
    P, d = spec.num_patches, spec.dim
    m = mask_count(P, ratio)
    sd = math.sqrt(noise)
    cluster = rng.integers(spec.num_clusters, size=size).astype(np.int64)
    z = spec.z_law.sample(rng, (size, spec.num_areas))
    noisy = _clean_contents(spec, cluster, z) + sd * rng.standard_normal((size, P, d))
    um1 = _random_unmasked(P, m, rng, size)
    um2 = _random_unmasked(P, m, rng, size)
    S = max(2 * size, 16 * num_negatives) if pool_size is None else int(pool_size)
    neg_cluster = rng.integers(spec.num_clusters, size=S).astype(np.int64)
    neg_z = spec.z_law.sample(rng, (S, spec.num_areas))
    negatives = _clean_contents(spec, neg_cluster, neg_z) + sd * rng.standard_normal((S, P, d))
    index = rng.integers(S, size=(size, num_negatives))
    weight = np.full(size, 1.0 / size)
    return ClBatch(noisy * um1[:, :, None], noisy * um2[:, :, None], negatives, index, cluster, neg_cluster, um1, um2, weight)


# ---------------------------------------------------------------------------
# Forward pass and similarity
# ---------------------------------------------------------------------------


def _position_rows(Q: np.ndarray, num_patches: int) -> np.ndarray:
    """The last ``P`` rows of Q, i.e. the rows reached by positional queries."""
    return Q[Q.shape[0] - num_patches :]


def _scores(W: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Attention rows for contents ``X`` (..., P, d) given position rows W."""
    return softmax_rows(np.einsum("pi,...qi->...pq", W, X, optimize=True))


def cl_forward(contents: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Pooled representation of one input (P, d) or a stack (..., P, d)."""
    X = np.asarray(contents, dtype=float)
    P = X.shape[-2]
    S = _scores(_position_rows(Q, P), X)
    return np.einsum("...pq,...qi->...i", S, X, optimize=True) / P


def cl_similarity(Xa: np.ndarray, Xb: np.ndarray, Q: np.ndarray) -> float:
    """Inner product of the two pooled representations."""
    return float(cl_forward(Xa, Q) @ cl_forward(Xb, Q))


@dataclass
class ClLossReport:
    """InfoNCE value, weight decay and the softmax scores over the pooled set.

    ``ell_pos[b]`` is the probability given to the positive view and
    ``ell_neg[b, s]`` the one given to the anchor's negative ``s``.
    """

    infonce: float
    regularizer: float
    total: float
    ell_pos: np.ndarray
    ell_neg: np.ndarray


def _representations(batch: ClBatch, Q: np.ndarray, reference: np.ndarray):
    plus = cl_forward(batch.plus, Q)
    pp = cl_forward(batch.plusplus, reference)
    neg = cl_forward(batch.negatives, reference)
    return plus, pp, neg


def _ell(plus: np.ndarray, pp: np.ndarray, neg: np.ndarray, index: np.ndarray, tau: float):
    neg_sims = np.take_along_axis(plus @ neg.T, index, axis=1)
    logits = np.concatenate([np.sum(plus * pp, axis=1)[:, None], neg_sims], axis=1) / tau
    lse = logsumexp(logits, axis=1)
    probs = np.exp(logits - lse[:, None])
    return logits, lse, probs


def cl_loss(batch: ClBatch, Q: np.ndarray, tau: float, lam: float, *, reference: np.ndarray | None = None) -> ClLossReport:
    """Regularized InfoNCE of ``Q`` on a batch.

    ``reference`` fixes the matrix used for the positive-pair partner and
    the negatives (the stop-gradient side); by default it is ``Q`` itself.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if lam < 0:
        raise ValueError("regularization must be non-negative")
    reference = Q if reference is None else reference
    plus, pp, neg = _representations(batch, Q, reference)
    logits, lse, probs = _ell(plus, pp, neg, batch.negative_index, tau)
    infonce = float(np.sum(batch.weight * (-tau) * (logits[:, 0] - lse)))
    reg = 0.5 * lam * float(np.sum(Q * Q))
    return ClLossReport(infonce, reg, infonce + reg, probs[:, 0], probs[:, 1:])


# ---------------------------------------------------------------------------
# Gradient
# ---------------------------------------------------------------------------


class GradientMismatchError(AssertionError):
    """The closed-form FP components disagree with the full gradient."""


@dataclass
class ClGradient:
    """Descent direction ``-dL/dQ`` including weight decay.

    ``alpha[p, k, m]`` is the FP component of the unregularized part read off
    the full matrix; ``lemma_alpha`` is the same quantity from the per-patch
    integrand (exact mode only).
    """

    full: np.ndarray
    unregularized: np.ndarray
    alpha: np.ndarray
    mode: str
    num_samples: int
    loss: ClLossReport
    lemma_alpha: np.ndarray | None = None
    lemma_deviation: float | None = None


def _pull_direction(pp: np.ndarray, neg: np.ndarray, index: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """``F(X++) - sum_{X'} ell(X') F(X')`` per anchor, shape (B, d)."""
    return pp - probs[:, :1] * pp - np.einsum("bs,bsi->bi", probs[:, 1:], neg[index])


def _row_gradient(W: np.ndarray, X: np.ndarray, direction: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Position-row block of ``dF/dQ`` applied to ``direction``, averaged."""
    P = X.shape[1]
    S = _scores(W, X)  # (B, P, P)
    h = np.einsum("bqi,bi->bq", X, direction)
    A = S * h[:, None, :]
    SX = S @ X
    rows = A @ X - A.sum(axis=2)[:, :, None] * SX
    return np.einsum("b,bpi->pi", weight, rows) / P


def lemma_alpha(spec: DataSpec, batch: ClBatch, Q: np.ndarray, tau: float) -> np.ndarray:
    """FP components of the unregularized descent direction, per patch.

    Evaluates ``(1/P) E[sum_q s_pq (X_q . g) (X_q - sum_b s_pb X_b) . v]``
    with ``g`` the pull direction, one feature vector at a time.
    """
    P = spec.num_patches
    W = Q[spec.num_features :]
    plus, pp, neg = _representations(batch, Q, Q)
    _, _, probs = _ell(plus, pp, neg, batch.negative_index, tau)
    g = _pull_direction(pp, neg, batch.negative_index, probs)
    out = np.zeros((P, spec.num_clusters, spec.num_areas))
    X = batch.plus
    S = _scores(W, X)
    for k in range(spec.num_clusters):
        for m in range(spec.num_areas):
            col = spec.feature_index(k, m)
            xv = X[:, :, col]  # (B, P) coordinate of each key along v_{k,m}
            centered = xv[:, None, :] - np.einsum("bpq,bq->bp", S, xv)[:, :, None]  # (B, p, q)
            xg = np.einsum("bqi,bi->bq", X, g)
            term = np.einsum("bpq,bq,bpq->bp", S, xg, centered)
            out[:, k, m] = batch.weight @ term / P
    return out


def cl_gradient(
    spec: DataSpec,
    Q: np.ndarray,
    tau: float,
    lam: float,
    batch: ClBatch,
    mode: str = "mc",
    *,
    check_lemma: bool | None = None,
    tolerance: float = LEMMA_TOLERANCE,
) -> ClGradient:
    """``-dL/dQ`` through the first view only, plus ``-lam Q``.

    In ``exact`` mode the FP components are re-evaluated from the per-patch
    integrand and a disagreement beyond ``tolerance`` raises.
    """
    if mode not in ("exact", "mc"):
        raise ValueError(f"unknown mode {mode!r}")
    F = spec.num_features
    W = Q[F:]
    plus, pp, neg = _representations(batch, Q, Q)
    logits, lse, probs = _ell(plus, pp, neg, batch.negative_index, tau)
    g = _pull_direction(pp, neg, batch.negative_index, probs)
    unreg = np.zeros_like(Q)
    unreg[F:] = _row_gradient(W, batch.plus, g, batch.weight)
    full = unreg - lam * Q
    alpha = unreg[F:, :F].reshape(spec.num_patches, spec.num_clusters, spec.num_areas).copy()
    report = ClLossReport(
        float(np.sum(batch.weight * (-tau) * (logits[:, 0] - lse))),
        0.5 * lam * float(np.sum(Q * Q)),
        0.0,
        probs[:, 0],
        probs[:, 1:],
    )
    report.total = report.infonce + report.regularizer
    out = ClGradient(full, unreg, alpha, mode, len(batch), report)
    if check_lemma if check_lemma is not None else mode == "exact":
        la = lemma_alpha(spec, batch, Q, tau)
        dev = float(np.max(np.abs(la - alpha)))
        out.lemma_alpha, out.lemma_deviation = la, dev
        if mode == "exact" and dev > tolerance:
            raise GradientMismatchError(f"contrastive FP components deviate by {dev:.3e}")
    return out


def cl_step(weights: AttentionWeights, eta: float, gradient: ClGradient) -> AttentionWeights:
    """One gradient-descent step; raises on divergence."""
    if eta < 0:
        raise ValueError("learning rate must be non-negative")
    new = AttentionWeights(weights.Q + eta * gradient.full, weights.spec, weights.step + 1)
    new.check_finite()
    return new


# ---------------------------------------------------------------------------
# Training driver
# ---------------------------------------------------------------------------


@dataclass
class ClStepStats:
    step: int
    loss: ClLossReport
    grad_norm: float


class ClTrainer:
    """Gradient descent on the regularized contrastive objective.

    By default one Monte Carlo pool of anchors and negatives is drawn at
    construction and reused at every step, so the iteration is a
    deterministic descent on a fixed empirical objective whose stationary
    points can be certified by the gradient norm. ``resample=True`` draws a
    fresh pool per step instead. Exact mode uses the enumerated batch.
    """

    def __init__(
        self,
        spec: DataSpec,
        eta: float,
        *,
        tau: float | None = None,
        lam: float | None = None,
        ratio: float = 0.5,
        noise: float | None = None,
        num_negatives: int = 32,
        batch_size: int = 256,
        pool_size: int | None = None,
        mode: str = "mc",
        resample: bool = False,
        seed: int = 0,
    ) -> None:
        self.spec = spec
        self.eta = float(eta)
        self.tau = default_temperature(spec.dim) if tau is None else float(tau)
        self.lam = default_regularization(spec.num_patches) if lam is None else float(lam)
        self.ratio = ratio
        self.noise = default_noise(spec.dim) if noise is None else float(noise)
        self.num_negatives = num_negatives
        self.batch_size = batch_size
        self.pool_size = pool_size
        self.mode = mode
        self.resample = resample
        self.rng = np.random.default_rng([seed, 2])
        self.weights = AttentionWeights.zeros(spec)
        if mode == "exact":
            self._pool = exact_cl_batch(spec, ratio, num_negatives)
        elif mode == "mc":
            self._pool = None if resample else self._draw()
        else:
            raise ValueError(f"unknown mode {mode!r}")

    def _draw(self) -> ClBatch:
        return draw_cl_batch(self.spec, self.batch_size, self.ratio, self.noise, self.num_negatives, self.rng, self.pool_size)

    def batch(self) -> ClBatch:
        return self._pool if self._pool is not None else self._draw()

    def gradient(self, batch: ClBatch | None = None) -> ClGradient:
        return cl_gradient(self.spec, self.weights.Q, self.tau, self.lam, batch or self.batch(), self.mode)

    def step(self) -> ClStepStats:
        grad = self.gradient()
        stats = ClStepStats(self.weights.step, grad.loss, float(np.linalg.norm(grad.full)))
        if not np.all(np.isfinite(grad.full)):
            raise DivergenceError(f"non-finite gradient at step {stats.step}")
        self.weights.Q += self.eta * grad.full
        self.weights.step += 1
        self.weights.check_finite()
        return stats
