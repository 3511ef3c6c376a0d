"""Masked-reconstruction objective for the one-layer softmax ViT.

The reconstruction of patch ``p`` is ``F_p = sum_q score_{p->q} mask(X)_q``
where the scores use ``mask(X) + E`` as both queries and keys. The loss is
half the expected squared error summed over masked patches.

Three independent routes compute the gradient:

* ``general_form_terms``: the full d x d matrix expression, evaluated with
  dense linear algebra per sample.
* ``lemma_form_terms``: closed forms of the FP and PP components written in
  terms of unmasked area attentions.
* ``vitssl.kernels``: the reduced position-row kernel used for training.

All gradients here are descent directions ``G = -dL/dQ``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionWeights, DivergenceError, softmax_rows
from .data import (
    DataSpec,
    MaskedSample,
    SampleBatch,
    draw_batch,
    enumerate_batch,
    full_area_mask_probability,
    mask_count,
)
from . import kernels

__all__ = [
    "GradientMismatchError",
    "MaeGradient",
    "LossReport",
    "mae_forward",
    "general_form_terms",
    "lemma_form_terms",
    "expected_batch",
    "mae_loss",
    "mae_gradient",
    "mae_step",
    "low_bound",
    "certified_low_bound",
    "MaeTrainer",
]

LEMMA_TOLERANCE = 1e-9
DECOMPOSITION_TOLERANCE = 1e-10


class GradientMismatchError(AssertionError):
    """Two gradient routes that must agree do not."""


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def mae_forward(masked: MaskedSample, Q: np.ndarray) -> np.ndarray:
    """Reconstruction of every patch, shape (P, d)."""
    spec = masked.spec
    X = masked.contents
    Xt = X + spec.position_basis()
    scores = softmax_rows(Xt @ Q @ Xt.T)
    return scores @ X


# ---------------------------------------------------------------------------
# Route 1: the general matrix expression
# ---------------------------------------------------------------------------


@dataclass
class DenseTerms:
    """Per-batch quantities of the general matrix expression."""

    loss_per_patch: np.ndarray  # (P,) weighted sums
    grad: np.ndarray  # (d, d)
    grad_by_cluster: np.ndarray  # (K, d, d)
    scores: np.ndarray  # (B, P, P)


def general_form_terms(spec: DataSpec, Q: np.ndarray, batch: SampleBatch, targets: str = "masked") -> DenseTerms:
    """Loss and ``-dL/dQ`` from the dense matrix expression.

    For each sample the descent direction is
    ``sum_{p in T} sum_q s_pq J_pq Xt_p (Xt_q - sum_b s_pb Xt_b)^T`` with
    ``J_pq = mask(X)_q . (X_p - F_p)`` and ``T`` the target set (masked
    patches, or every patch with ``targets="all"``).
    """
    X = batch.contents(spec, masked=True)
    Xfull = batch.contents(spec, masked=False)
    Xt = X + spec.position_basis()[None]
    S = softmax_rows(np.einsum("bpi,ij,bqj->bpq", Xt, Q, Xt, optimize=True))
    F = S @ X
    if targets == "masked":
        tmask = ~batch.unmasked
    elif targets == "all":
        tmask = np.ones_like(batch.unmasked)
    else:
        raise ValueError(f"unknown target set {targets!r}")
    R = (Xfull - F) * tmask[:, :, None]
    w = batch.weight
    loss = np.einsum("b,bp->p", w, 0.5 * np.sum(R * R, axis=2))
    J = R @ np.swapaxes(X, 1, 2)
    A = S * J
    Rm = A @ Xt - A.sum(axis=2, keepdims=True) * (S @ Xt)
    K = spec.num_clusters
    by_cluster = np.zeros((K, spec.dim, spec.dim))
    for k in range(K):
        rows = batch.cluster == k
        if np.any(rows):
            by_cluster[k] = np.einsum("b,bpi,bpj->ij", w[rows], Xt[rows], Rm[rows], optimize=True)
    return DenseTerms(loss, by_cluster.sum(axis=0), by_cluster, S)


# ---------------------------------------------------------------------------
# Route 2: closed forms in terms of area attentions
# ---------------------------------------------------------------------------


@dataclass
class LemmaTerms:
    alpha: np.ndarray  # (P, K, N) FP components
    beta: np.ndarray  # (P, P) PP components
    beta_by_cluster: np.ndarray  # (K, P, P)
    loss_per_patch: np.ndarray  # (P,) decomposed loss
    restricted_loss: np.ndarray  # (P,) loss on masks that leave part of the own area visible


def lemma_form_terms(spec: DataSpec, batch: SampleBatch, scores: np.ndarray) -> LemmaTerms:
    """FP/PP gradient components and the loss from unmasked area attentions.

    For a masked query ``p`` with own area ``n`` and unmasked area
    attentions ``A_a``, writing ``S = sum_a z_a^2 A_a^2``:

    * FP, own feature:   ``A_n (z_n^3 (1-A_n)^2 + z_n (S - z_n^2 A_n^2))``
    * FP, other feature: ``A_m (z_m (S - z_m^2 A_m^2 - z_n^2 A_n^2)
      - z_m z_n^2 (1-A_n) A_n - z_m^3 (1-A_m) A_m)``
    * PP, key in own area:   ``s_pq (S - z_n^2 A_n^2 + z_n^2 (1-A_n)(u_q - A_n))``
    * PP, key in area ``m``: ``s_pq (S - z_n^2 A_n^2 - z_n^2 (1-A_n) A_n - u_q z_m^2 A_m)``

    where ``u_q`` indicates that key ``q`` is unmasked.
    """
    P, K, N = spec.num_patches, spec.num_clusters, spec.num_areas
    B = len(batch)
    area = spec.area_index[batch.cluster]  # (B, P)
    u = batch.unmasked.astype(float)
    onehot = (area[:, :, None] == np.arange(N)).astype(float)
    attn = np.einsum("bpq,bqn->bpn", scores, onehot * u[:, :, None])  # (B, P, N)
    z = batch.z
    zn = np.take_along_axis(z, area, axis=1)  # (B, P) own-area latent per query
    An = np.take_along_axis(attn, area[:, :, None], axis=2)[:, :, 0]
    zz = z[:, None, :] ** 2 * attn**2  # (B, P, N)
    S = zz.sum(axis=2)
    rest = S - zn**2 * An**2  # sum over a != n

    zm = z[:, None, :]
    alpha_other = attn * (
        zm * (rest[:, :, None] - zz)
        - zm * (zn**2 * (1 - An) * An)[:, :, None]
        - zm**3 * (1 - attn) * attn
    )
    alpha_same = An * (zn**3 * (1 - An) ** 2 + zn * rest)
    own = area[:, :, None] == np.arange(N)
    alpha = np.where(own, alpha_same[:, :, None], alpha_other)

    same_area = area[:, :, None] == area[:, None, :]  # (B, p, q)
    Am_q = np.take_along_axis(attn, np.broadcast_to(area[:, None, :], (B, P, P)), axis=2)
    zm_q = np.take_along_axis(z, area, axis=1)[:, None, :]
    beta_same = scores * (rest[:, :, None] + (zn**2 * (1 - An))[:, :, None] * (u[:, None, :] - An[:, :, None]))
    beta_other = scores * (
        rest[:, :, None] - (zn**2 * (1 - An) * An)[:, :, None] - u[:, None, :] * zm_q**2 * Am_q
    )
    beta = np.where(same_area, beta_same, beta_other)

    target = (~batch.unmasked).astype(float) * batch.weight[:, None]  # (B, P)
    alpha_out = np.zeros((P, K, N))
    beta_k = np.zeros((K, P, P))
    for k in range(K):
        rows = batch.cluster == k
        if np.any(rows):
            alpha_out[:, k, :] = np.einsum("bp,bpn->pn", target[rows], alpha[rows])
            beta_k[k] = np.einsum("bp,bpq->pq", target[rows], beta[rows])

    per = 0.5 * (zn**2 * (1 - An) ** 2 + rest)
    loss = np.einsum("bp,bp->p", target, per)
    visible = np.einsum("bpq,bq->bp", same_area.astype(float), u) > 0
    restricted = np.einsum("bp,bp->p", target * visible, per)
    return LemmaTerms(alpha_out, beta_k.sum(axis=0), beta_k, loss, restricted)


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


@dataclass
class MaeGradient:
    """Descent direction ``G = -dL/dQ`` and its FP/PP components.

    ``alpha`` and ``beta`` are read off ``full`` by projection onto the
    bases; ``lemma_alpha`` and ``lemma_beta`` come from the closed forms and
    are only filled in for exact evaluations.
    """

    full: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    beta_by_cluster: np.ndarray
    mode: str
    num_samples: int
    lemma_alpha: np.ndarray | None = None
    lemma_beta: np.ndarray | None = None
    lemma_beta_by_cluster: np.ndarray | None = None
    lemma_deviation: float | None = None


@dataclass
class LossReport:
    """Population (or estimated) loss and its per-patch pieces."""

    total: float
    per_patch: np.ndarray
    decomposed_per_patch: np.ndarray
    low_bound: np.ndarray
    certified_low_bound: np.ndarray
    restricted_per_patch: np.ndarray
    mode: str
    num_samples: int
    decomposition_deviation: float = field(default=0.0)


# ---------------------------------------------------------------------------
# Lower bounds on the per-patch loss
# ---------------------------------------------------------------------------


def low_bound(spec: DataSpec, patch: int, ratio: float) -> float:
    """Reference level ``1/2 (E z^2 + L^2/(N-1)) sum_k P(k) P(own area fully masked)``.

    This is the level against which trained losses are compared. It is not a
    valid lower bound in general: when every patch of the own area is masked
    the model can send its attention to masked patches and pay only
    ``z_n^2 / 2``; see ``certified_low_bound``.
    """
    law = spec.z_law
    N = spec.num_areas
    coef = 0.5 * (law.second_moment() + law.low**2 / (N - 1))
    return coef * _mask_event_mass(spec, patch, ratio)


def certified_low_bound(spec: DataSpec, patch: int, ratio: float) -> float:
    """``1/2 E z^2 sum_k P(k) P(own area fully masked)``, a true lower bound."""
    return 0.5 * spec.z_law.second_moment() * _mask_event_mass(spec, patch, ratio)


def _mask_event_mass(spec: DataSpec, patch: int, ratio: float) -> float:
    total = 0.0
    for k in range(spec.num_clusters):
        size = spec.area_sizes[spec.area_of(k, patch)]
        total += full_area_mask_probability(spec.num_patches, size, ratio)
    return total / spec.num_clusters


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def expected_batch(
    spec: DataSpec,
    ratio: float,
    mode: str,
    *,
    batch_size: int = 256,
    rng: np.random.Generator | None = None,
    cap: int = 100_000,
) -> SampleBatch:
    """Exact enumeration batch, or a Monte Carlo batch of ``batch_size``."""
    if mode == "exact":
        return enumerate_batch(spec, ratio, cap=cap)
    if mode == "mc":
        if rng is None:
            raise ValueError("Monte Carlo mode needs an rng")
        return draw_batch(spec, batch_size, ratio, rng)
    raise ValueError(f"unknown mode {mode!r}")


def mae_loss(
    spec: DataSpec,
    Q: np.ndarray,
    ratio: float = 0.5,
    mode: str = "exact",
    *,
    batch: SampleBatch | None = None,
    batch_size: int = 256,
    rng: np.random.Generator | None = None,
) -> LossReport:
    """Expected masked-reconstruction loss with its area decomposition."""
    if batch is None:
        batch = expected_batch(spec, ratio, mode, batch_size=batch_size, rng=rng)
    dense = general_form_terms(spec, Q, batch)
    lemma = lemma_form_terms(spec, batch, dense.scores)
    dev = float(np.max(np.abs(dense.loss_per_patch - lemma.loss_per_patch)))
    if mode == "exact" and dev > DECOMPOSITION_TOLERANCE:
        raise GradientMismatchError(f"loss decomposition deviates by {dev:.3e}")
    P = spec.num_patches
    return LossReport(
        total=float(dense.loss_per_patch.sum()),
        per_patch=dense.loss_per_patch,
        decomposed_per_patch=lemma.loss_per_patch,
        low_bound=np.array([low_bound(spec, p, ratio) for p in range(P)]),
        certified_low_bound=np.array([certified_low_bound(spec, p, ratio) for p in range(P)]),
        restricted_per_patch=lemma.restricted_loss,
        mode=mode,
        num_samples=len(batch),
        decomposition_deviation=dev,
    )


def _components(spec: DataSpec, G: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rows = G[spec.num_features :]
    alpha = rows[:, : spec.num_features].reshape(spec.num_patches, spec.num_clusters, spec.num_areas)
    beta = rows[:, spec.num_features :]
    return alpha.copy(), beta.copy()


def mae_gradient(
    spec: DataSpec,
    Q: np.ndarray,
    ratio: float = 0.5,
    mode: str = "exact",
    *,
    batch: SampleBatch | None = None,
    batch_size: int = 256,
    rng: np.random.Generator | None = None,
    check_lemmas: bool = True,
    tolerance: float = LEMMA_TOLERANCE,
) -> MaeGradient:
    """``-dL/dQ`` from the general expression, cross-checked by the closed forms.

    In exact mode a disagreement above ``tolerance`` between the general
    expression and the closed forms raises ``GradientMismatchError``.
    """
    if batch is None:
        batch = expected_batch(spec, ratio, mode, batch_size=batch_size, rng=rng)
    dense = general_form_terms(spec, Q, batch)
    alpha, beta = _components(spec, dense.grad)
    F = spec.num_features
    beta_k = dense.grad_by_cluster[:, F:, F:].copy()
    out = MaeGradient(dense.grad, alpha, beta, beta_k, mode, len(batch))
    if check_lemmas:
        lemma = lemma_form_terms(spec, batch, dense.scores)
        dev = max(
            float(np.max(np.abs(lemma.alpha - alpha))),
            float(np.max(np.abs(lemma.beta - beta))),
            float(np.max(np.abs(lemma.beta_by_cluster - beta_k))),
        )
        out.lemma_alpha = lemma.alpha
        out.lemma_beta = lemma.beta
        out.lemma_beta_by_cluster = lemma.beta_by_cluster
        out.lemma_deviation = dev
        if mode == "exact" and dev > tolerance:
            raise GradientMismatchError(f"closed-form components deviate from the general form by {dev:.3e}")
    return out


def mae_step(weights: AttentionWeights, eta: float, gradient: MaeGradient) -> AttentionWeights:
    """One gradient-descent step ``Q + eta * G``; raises on divergence."""
    if eta < 0:
        raise ValueError("learning rate must be non-negative")
    new = AttentionWeights(weights.Q + eta * gradient.full, weights.spec, weights.step + 1)
    new.check_finite()
    return new


# ---------------------------------------------------------------------------
# Training driver on the fast kernel
# ---------------------------------------------------------------------------


@dataclass
class StepStats:
    step: int
    loss: float
    loss_per_patch: np.ndarray
    own_attn: np.ndarray
    grad_norm: float


class MaeTrainer:
    """Gradient descent on the masked-reconstruction objective.

    Exact mode reuses one enumerated batch; Monte Carlo mode draws
    ``batch_size`` fresh (sample, mask) pairs per step from ``rng``.
    The per-cluster PP pieces are accumulated alongside Q.
    """

    def __init__(
        self,
        spec: DataSpec,
        eta: float,
        ratio: float = 0.5,
        mode: str = "exact",
        *,
        batch_size: int = 256,
        seed: int = 0,
        backend: str | None = None,
        track_cluster_pp: bool = True,
    ) -> None:
        mask_count(spec.num_patches, ratio)
        self.spec = spec
        self.eta = float(eta)
        self.ratio = ratio
        self.mode = mode
        self.batch_size = batch_size
        self.rng = np.random.default_rng([seed, 1])
        self.backend = backend
        self.track_cluster_pp = track_cluster_pp
        self.weights = AttentionWeights.zeros(spec)
        self.pp_by_cluster = np.zeros((spec.num_clusters, spec.num_patches, spec.num_patches))
        self._exact_batch = enumerate_batch(spec, ratio) if mode == "exact" else None
        if mode not in ("exact", "mc"):
            raise ValueError(f"unknown mode {mode!r}")

    def batch(self) -> SampleBatch:
        if self._exact_batch is not None:
            return self._exact_batch
        return draw_batch(self.spec, self.batch_size, self.ratio, self.rng)

    def evaluate(self, batch: SampleBatch | None = None, with_cluster_pp: bool = False) -> kernels.KernelResult:
        batch = batch if batch is not None else self.batch()
        spec = self.spec
        return kernels.mae_masked_terms(
            self.weights.position_rows,
            spec.area_index,
            spec.num_areas,
            batch.cluster,
            batch.z,
            batch.unmasked,
            batch.weight,
            with_cluster_pp,
            backend=self.backend,
        )

    def step(self) -> StepStats:
        """Evaluate at the current Q, then move Q along the descent direction."""
        res = self.evaluate(with_cluster_pp=self.track_cluster_pp)
        F = self.spec.num_features
        self.weights.Q[F:] += self.eta * res.grad
        if res.pp_by_cluster is not None:
            self.pp_by_cluster += self.eta * res.pp_by_cluster
        stats = StepStats(
            step=self.weights.step,
            loss=float(res.loss.sum()),
            loss_per_patch=res.loss,
            own_attn=res.own_attn,
            grad_norm=float(np.linalg.norm(res.grad)),
        )
        self.weights.step += 1
        if not np.all(np.isfinite(res.grad)):
            raise DivergenceError(f"non-finite gradient at step {stats.step}")
        self.weights.check_finite()
        return stats
