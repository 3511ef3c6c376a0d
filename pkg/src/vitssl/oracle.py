"""Independent verification machinery.

Nothing in this module reuses the training code paths for the quantities it
checks: the loss evaluators below build their own enumerations and contents
straight from the data description, the lower bound uses the hypergeometric
law from scipy rather than the binomial-ratio formula of ``vitssl.data``, and
finite differences only ever call a black-box loss.
"""

from __future__ import annotations

import itertools
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from .data import DataSpec, MaskedSample, Sample, SpecError, ZLaw, build_spec

__all__ = [
    "OracleConfig",
    "NonDeterministicLossError",
    "CompensatedSum",
    "fd_gradient",
    "relative_error",
    "enumerate_expectation",
    "oracle_low_bound",
    "direct_mae_loss",
    "direct_cl_loss",
    "hypergeometric_chi_square",
    "CheckResult",
    "OracleReport",
    "run_oracle_suite",
]


@dataclass(frozen=True)
class OracleConfig:
    """Settings of the oracle suite.

    ``step`` is the central-difference step. ``tolerances`` maps check
    names to the largest accepted deviation.
    """

    step: float = 1e-5
    scheme: str = "central"
    enumeration_cap: int = 100_000
    num_instances: int = 20
    chi_square_draws: int = 100_000
    chi_square_alpha: float = 0.01
    seed: int = 0
    tolerances: dict = field(
        default_factory=lambda: {
            "mae_fd": 1e-4,
            "lemma": 1e-9,
            "cl_fd": 1e-4,
            "cl_lemma": 1e-9,
            "enumeration": 1e-12,
        }
    )

    def __post_init__(self) -> None:
        if not 1e-7 <= self.step <= 1e-3:
            raise ValueError("finite-difference step must lie in [1e-7, 1e-3]")
        if self.scheme != "central":
            raise ValueError("only central differences are supported")

    def tolerance(self, name: str) -> float:
        return float(self.tolerances[name])


class NonDeterministicLossError(RuntimeError):
    """Two evaluations of a loss at the same point differ."""


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def fd_gradient(loss_fn: Callable[[np.ndarray], float], Q: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Entrywise central differences ``(L(Q + h E_ij) - L(Q - h E_ij)) / 2h``.

    The loss is evaluated twice at ``Q`` first; differing values are
    rejected since finite differences of a random function are meaningless.
    """
    Q = np.array(Q, dtype=float)
    first, second = loss_fn(Q.copy()), loss_fn(Q.copy())
    if first != second:
        raise NonDeterministicLossError(f"loss changed between calls: {first!r} vs {second!r}")
    grad = np.zeros_like(Q)
    for idx in np.ndindex(Q.shape):
        old = Q[idx]
        Q[idx] = old + h
        up = loss_fn(Q)
        Q[idx] = old - h
        down = loss_fn(Q)
        Q[idx] = old
        grad[idx] = (up - down) / (2.0 * h)
    return grad


def relative_error(approx: np.ndarray, reference: np.ndarray, floor: float = 1e-300) -> float:
    """Frobenius-norm relative error ``|approx - reference| / |reference|``."""
    return float(np.linalg.norm(np.asarray(approx) - np.asarray(reference)) / max(np.linalg.norm(reference), floor))


# ---------------------------------------------------------------------------
# Exact expectations
# ---------------------------------------------------------------------------


class CompensatedSum:
    """Neumaier's compensated running sum for scalars or equal-shape arrays."""

    def __init__(self) -> None:
        self.total = None
        self.carry = None

    def add(self, value) -> None:
        v = np.asarray(value, dtype=float)
        if self.total is None:
            self.total = v.copy()
            self.carry = np.zeros_like(v)
            return
        t = self.total + v
        big = np.abs(self.total) >= np.abs(v)
        self.carry = self.carry + np.where(big, (self.total - t) + v, (v - t) + self.total)
        self.total = t

    def value(self):
        if self.total is None:
            return 0.0
        out = self.total + self.carry
        return float(out) if out.ndim == 0 else out


def _z_nodes(law: ZLaw, num_areas: int) -> list[tuple[np.ndarray, float]]:
    nodes, weights = law.quadrature()
    out = []
    for combo in itertools.product(range(len(nodes)), repeat=num_areas):
        out.append((nodes[list(combo)], float(np.prod(weights[list(combo)]))))
    return out


def enumerate_expectation(
    spec: DataSpec,
    per_mask_fn: Callable[[MaskedSample], object],
    ratio: float,
    *,
    cap: int = 100_000,
    shuffle: np.random.Generator | None = None,
):
    """Exact average of ``per_mask_fn`` over masks, clusters and latent nodes.

    Every mask of size ``round(ratio * P)`` and every cluster is equally
    likely; latent vectors run over the product quadrature of the law.
    ``shuffle`` permutes the visiting order, which must not change the
    result beyond rounding.
    """
    P = spec.num_patches
    masked = int(math.floor(ratio * P + 0.5))
    n_masks = math.comb(P, masked)
    if n_masks * spec.num_clusters > cap:
        raise SpecError(f"enumeration of {n_masks * spec.num_clusters} mask-cluster pairs exceeds cap {cap}")
    items = [
        (k, combo, z, w)
        for k in range(spec.num_clusters)
        for combo in itertools.combinations(range(P), masked)
        for z, w in _z_nodes(spec.z_law, spec.num_areas)
    ]
    if shuffle is not None:
        items = [items[i] for i in shuffle.permutation(len(items))]
    acc = CompensatedSum()
    scale = 1.0 / (spec.num_clusters * n_masks)
    for k, combo, z, w in items:
        unmasked = np.ones(P, dtype=bool)
        unmasked[list(combo)] = False
        value = per_mask_fn(MaskedSample(Sample(spec, k, z), unmasked))
        acc.add(np.asarray(value, dtype=float) * (w * scale))
    return acc.value()


def oracle_low_bound(spec: DataSpec, patch: int, ratio: float) -> float:
    """Reference loss level of a patch from the hypergeometric law.

    ``1/2 (E z^2 + L^2/(N-1)) (1/K) sum_k P(no unmasked patch in the own area)``
    with the probability read from ``scipy.stats.hypergeom``.
    """
    P = spec.num_patches
    visible = P - int(math.floor(ratio * P + 0.5))
    law = spec.z_law
    coef = 0.5 * (law.second_moment() + law.low**2 / (spec.num_areas - 1))
    mass = 0.0
    for k in range(spec.num_clusters):
        size = int(np.sum(spec.area_index[k] == spec.area_index[k, patch]))
        mass += stats.hypergeom(P, size, visible).pmf(0)
    return coef * mass / spec.num_clusters


# ---------------------------------------------------------------------------
# Direct loss evaluators
# ---------------------------------------------------------------------------


def _contents(spec: DataSpec, cluster: int, z: np.ndarray) -> np.ndarray:
    X = np.zeros((spec.num_patches, spec.dim))
    for p in range(spec.num_patches):
        a = int(spec.area_index[cluster, p])
        X[p] = z[a] * spec.feature_vector(cluster, a)
    return X


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class _MaeEnumeration:
    """Clean images per (cluster, latent node) and the 0/1 keep pattern of every mask.

    A masked input is ``diag(keep) X``, so its tokens are
    ``diag(keep) X + E`` and the logit matrix expands bilinearly into four
    P x P blocks that are shared by all masks of one image.
    """

    def __init__(self, spec: DataSpec, ratio: float) -> None:
        P = spec.num_patches
        masked = int(math.floor(ratio * P + 0.5))
        combos = list(itertools.combinations(range(P), masked))
        keep = np.ones((len(combos), P))
        for i, combo in enumerate(combos):
            keep[i, list(combo)] = 0.0
        self.keep = keep
        self.pair = keep[:, :, None] * keep[:, None, :]
        self.E = spec.position_basis()
        self.images = []
        for k in range(spec.num_clusters):
            for z, w in _z_nodes(spec.z_law, spec.num_areas):
                self.images.append((_contents(spec, k, z), w / (spec.num_clusters * len(combos))))

    def loss(self, Q: np.ndarray) -> float:
        keep, E = self.keep, self.E
        M, P = keep.shape
        total = 0.0
        EQ = E @ Q
        D = EQ @ E.T
        for X, w in self.images:
            XQ = X @ Q
            logits = self.pair * (XQ @ X.T) + keep[:, :, None] * (XQ @ E.T) + keep[:, None, :] * (EQ @ X.T) + D
            logits -= logits.max(axis=2, keepdims=True)
            np.exp(logits, out=logits)
            logits /= logits.sum(axis=2, keepdims=True)
            out = (logits * keep[:, None, :]).reshape(M * P, P) @ X
            resid = out.reshape(M, P, -1) - X[None]
            err = np.square(resid).sum(axis=2) * (1.0 - keep)
            total += w * float(err.sum())
        return 0.5 * total


def direct_mae_loss(spec: DataSpec, ratio: float) -> Callable[[np.ndarray], float]:
    """A closure computing the exact population reconstruction loss."""
    return _MaeEnumeration(spec, ratio).loss


def direct_cl_loss(
    spec: DataSpec,
    ratio: float,
    num_negatives: int,
    tau: float,
    lam: float,
    reference: np.ndarray,
) -> Callable[[np.ndarray], float]:
    """Exact noise-free contrastive loss with the stop-gradient side frozen.

    The positive partner and the negatives are represented with
    ``reference``; only the first view depends on the argument. Negatives
    are the fixed balanced set (negative ``s`` from cluster ``s mod K`` with
    mean latents). Each distinct masked view is pooled once per evaluation.
    """
    P = spec.num_patches
    masked = int(math.floor(ratio * P + 0.5))
    combos = list(itertools.combinations(range(P), masked))
    E = spec.position_basis()

    def pool(Qm: np.ndarray, X: np.ndarray) -> np.ndarray:
        S = _softmax(np.einsum("pi,...qi->...pq", E @ Qm, X))
        return np.einsum("...pq,...qi->...i", S, X) / P

    groups = []
    for k in range(spec.num_clusters):
        for z, w in _z_nodes(spec.z_law, spec.num_areas):
            X = _contents(spec, k, z)
            views = []
            for combo in combos:
                keep = np.ones(P)
                keep[list(combo)] = 0.0
                views.append(X * keep[:, None])
            groups.append((np.array(views), w / spec.num_clusters))
    neg = np.array([_contents(spec, s % spec.num_clusters, np.full(spec.num_areas, spec.z_law.mean())) for s in range(num_negatives)])
    neg_rep = pool(reference, neg)
    ref_reps = [pool(reference, views) for views, _ in groups]
    refQ = reference.copy()

    def loss(Q: np.ndarray) -> float:
        total = 0.0
        for (views, w), partner in zip(groups, ref_reps):
            first = pool(Q, views)  # (M, d)
            pos = first @ partner.T / tau  # (M, M): view a paired with partner b
            negs = first @ neg_rep.T / tau  # (M, S)
            neg_lse = logsumexp(negs, axis=1, keepdims=True)
            lse = np.logaddexp(pos, neg_lse)
            total += w * float(np.mean(-tau * (pos - lse)))
        return total + 0.5 * lam * float(np.sum(Q * Q))

    loss.reference = refQ  # type: ignore[attr-defined]
    return loss


# ---------------------------------------------------------------------------
# Masking law
# ---------------------------------------------------------------------------


def hypergeometric_chi_square(spec: DataSpec, area: int, ratio: float, draws: int, rng: np.random.Generator) -> tuple[float, float]:
    """Chi-square goodness of fit of visible-patch counts in one area.

    Masks come from the library's batch sampler. Bins with expected count
    below five are pooled into their neighbour. Returns (statistic, p-value).
    """
    from .data import draw_batch

    P = spec.num_patches
    visible = P - int(math.floor(ratio * P + 0.5))
    batch = draw_batch(spec, draws, ratio, rng)
    members = spec.area_index[batch.cluster] == area
    size = int(np.sum(spec.area_index[0] == area))
    counts = np.bincount(np.sum(batch.unmasked & members, axis=1), minlength=size + 1).astype(float)
    expected = stats.hypergeom(P, size, visible).pmf(np.arange(size + 1)) * draws
    obs_b: list[float] = []
    exp_b: list[float] = []
    o_acc = e_acc = 0.0
    for o, e in zip(counts, expected):
        o_acc += o
        e_acc += e
        if e_acc >= 5.0:
            obs_b.append(o_acc)
            exp_b.append(e_acc)
            o_acc = e_acc = 0.0
    if e_acc > 0:
        obs_b[-1] += o_acc
        exp_b[-1] += e_acc
    res = stats.chisquare(obs_b, exp_b)
    return float(res.statistic), float(res.pvalue)


# ---------------------------------------------------------------------------
# Suite
# ---------------------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    passed: bool
    deviation: float
    tolerance: float
    seconds: float
    detail: str = ""


@dataclass
class OracleReport:
    checks: list[CheckResult]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "checks": [asdict(c) for c in self.checks]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        lines = [f"{'check':<28}{'result':<8}{'deviation':>12}{'tolerance':>12}{'seconds':>9}"]
        for c in self.checks:
            lines.append(
                f"{c.name:<28}{'PASS' if c.passed else 'FAIL':<8}{c.deviation:>12.3e}{c.tolerance:>12.1e}{c.seconds:>9.2f}"
            )
        return "\n".join(lines)


def mae_instances(count: int, seed: int) -> list[tuple[DataSpec, np.ndarray]]:
    """Random (data description, Q) pairs at P=8 with d=24.

    Alternates between eight clusters of two areas and four clusters of four
    areas, both with point-mass latents, and draws Q with a random scale.
    """
    rng = np.random.default_rng([seed, 5])
    layouts = [(8, 6, 2), (8, 5, 3), (4, 5, 1), (8, 7, 1)]
    out = []
    for i in range(count):
        K, c1, cs = layouts[i % len(layouts)]
        spec = build_spec(8, K, global_size=c1, local_size=cs, z_law=ZLaw.point(float(rng.uniform(0.8, 1.2))), seed=int(rng.integers(1 << 30)))
        scale = float(rng.choice([0.1, 0.5, 1.0, 2.0]))
        out.append((spec, rng.normal(0.0, scale, (spec.dim, spec.dim))))
    return out


def _timed(fn):
    t0 = time.perf_counter()
    res = fn()
    return res, time.perf_counter() - t0


def check_mae_gradient(config: OracleConfig) -> CheckResult:
    """Analytic descent direction against central differences of the loss."""
    from .mae import mae_gradient

    def run():
        worst = 0.0
        for spec, Q in mae_instances(config.num_instances, config.seed):
            fd = fd_gradient(direct_mae_loss(spec, 0.5), Q, config.step)
            g = mae_gradient(spec, Q, 0.5, "exact", check_lemmas=False)
            worst = max(worst, relative_error(-g.full, fd))
        return worst

    worst, secs = _timed(run)
    tol = config.tolerance("mae_fd")
    return CheckResult("mae_gradient_fd", worst <= tol, worst, tol, secs, f"{config.num_instances} instances")


def check_lemma_parity(config: OracleConfig, flip_alpha: bool = False) -> CheckResult:
    """Closed-form FP/PP components against projections of the full gradient."""
    from .mae import _components, expected_batch, general_form_terms, lemma_form_terms

    def run():
        worst = 0.0
        for spec, Q in mae_instances(config.num_instances, config.seed):
            batch = expected_batch(spec, 0.5, "exact")
            dense = general_form_terms(spec, Q, batch)
            alpha, beta = _components(spec, dense.grad)
            lemma = lemma_form_terms(spec, batch, dense.scores)
            la = -lemma.alpha if flip_alpha else lemma.alpha
            F = spec.num_features
            worst = max(
                worst,
                float(np.max(np.abs(la - alpha))),
                float(np.max(np.abs(lemma.beta - beta))),
                float(np.max(np.abs(lemma.beta_by_cluster - dense.grad_by_cluster[:, F:, F:]))),
            )
        return worst

    worst, secs = _timed(run)
    tol = config.tolerance("lemma")
    return CheckResult("mae_lemma_parity", worst <= tol, worst, tol, secs, "flipped alpha" if flip_alpha else "")


def cl_instance(seed: int) -> tuple[DataSpec, np.ndarray, dict]:
    """The P=8 contrastive oracle instance with a random Q."""
    from .cl import default_regularization, default_temperature

    rng = np.random.default_rng([seed, 6])
    spec = build_spec(8, 4, global_size=6, local_size=2, z_law=ZLaw.point(1.0), seed=seed)
    Q = rng.normal(0.0, 0.5, (spec.dim, spec.dim))
    params = {"ratio": 0.5, "num_negatives": 8, "tau": default_temperature(spec.dim), "lam": default_regularization(8)}
    return spec, Q, params


def check_cl_gradient(config: OracleConfig) -> tuple[CheckResult, CheckResult]:
    """Contrastive gradient against differences of the frozen-partner loss."""
    from .cl import cl_gradient, exact_cl_batch

    t0 = time.perf_counter()
    spec, Q, prm = cl_instance(config.seed)
    batch = exact_cl_batch(spec, prm["ratio"], prm["num_negatives"])
    g = cl_gradient(spec, Q, prm["tau"], prm["lam"], batch, "exact", check_lemma=True, tolerance=math.inf)
    t_lemma = time.perf_counter() - t0
    loss = direct_cl_loss(spec, prm["ratio"], prm["num_negatives"], prm["tau"], prm["lam"], Q)
    fd = fd_gradient(loss, Q, config.step)
    err = relative_error(-g.full, fd)
    secs = time.perf_counter() - t0
    tol, ltol = config.tolerance("cl_fd"), config.tolerance("cl_lemma")
    return (
        CheckResult("cl_gradient_fd", err <= tol, err, tol, secs),
        CheckResult("cl_lemma_parity", g.lemma_deviation <= ltol, g.lemma_deviation, ltol, t_lemma),
    )


def check_enumeration(config: OracleConfig) -> CheckResult:
    """Per-patch decomposed loss summed by the enumerator against the exact loss."""
    from .attention import mae_scores
    from .mae import mae_loss

    def run():
        worst = 0.0
        rng = np.random.default_rng([config.seed, 7])
        for spec, Q in mae_instances(4, config.seed + 1):

            def per_mask(ms: MaskedSample) -> np.ndarray:
                prof = mae_scores(ms, Q)
                z = ms.base.z
                out = np.zeros(spec.num_patches)
                area = spec.area_index[ms.cluster]
                for p in ms.mask_set:
                    a = prof.unmasked_area_attn[p]
                    n = area[p]
                    resid = z**2 * a**2
                    resid[n] = z[n] ** 2 * (1.0 - a[n]) ** 2
                    out[p] = 0.5 * resid.sum()
                return out

            direct = enumerate_expectation(spec, per_mask, 0.5, cap=config.enumeration_cap, shuffle=rng)
            rep = mae_loss(spec, Q, 0.5, "exact")
            worst = max(worst, float(np.max(np.abs(direct - rep.per_patch))))
        return worst

    worst, secs = _timed(run)
    tol = config.tolerance("enumeration")
    return CheckResult("enumeration_dual_path", worst <= tol, worst, tol, secs)


def check_masking_law(config: OracleConfig) -> CheckResult:
    def run():
        rng = np.random.default_rng([config.seed, 8])
        spec = build_spec(64, 2, 0.9, 0.35, seed=config.seed)
        return hypergeometric_chi_square(spec, 1, 0.5, config.chi_square_draws, rng)

    (stat, pval), secs = _timed(run)
    return CheckResult(
        "hypergeometric_chi_square", pval > config.chi_square_alpha, pval, config.chi_square_alpha, secs, f"statistic {stat:.3f}; deviation column holds the p-value"
    )


def run_oracle_suite(config: OracleConfig = OracleConfig(), *, flip_alpha: bool = False, only: Iterable[str] | None = None) -> OracleReport:
    """Run every oracle check and collect the results."""
    wanted = set(only) if only is not None else None
    checks: list[CheckResult] = []

    def want(name: str) -> bool:
        return wanted is None or name in wanted

    if want("mae_gradient_fd"):
        checks.append(check_mae_gradient(config))
    if want("mae_lemma_parity"):
        checks.append(check_lemma_parity(config, flip_alpha))
    if want("cl_gradient_fd") or want("cl_lemma_parity"):
        checks.extend(check_cl_gradient(config))
    if want("enumeration_dual_path"):
        checks.append(check_enumeration(config))
    if want("hypergeometric_chi_square"):
        checks.append(check_masking_law(config))
    return OracleReport(checks)
