"""Phase labelling, end-of-training checks and the attention-diversity metric.

Phase labels follow a (patch, cluster) pair through training by comparing
its FP correlations with level sets that scale with ``log P``. The local
patches of a positive-gap configuration go through four stages (a decrease
of the global correlation, a widening gap, growth of the own-area
correlation, saturation). Local patches of a negative-gap configuration and
global patches skip the first two. Once a stage is left it is never
re-entered, so labels cannot regress.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np
from scipy.spatial.distance import pdist

from .attention import area_attention, softmax_rows
from .data import DataSpec, SampleBatch, draw_batch, enumerate_batch, enumeration_size, info_gap, mask_count
from . import kernels
from .mae import low_bound

__all__ = [
    "PhaseLabel",
    "PhaseThresholds",
    "PhaseSeries",
    "threshold_levels",
    "PhaseTracker",
    "classify_phase",
    "DiversityReport",
    "diversity_metric",
    "mae_attention_matrix",
    "cl_attention_matrix",
    "model_diversity",
    "PatchCheck",
    "TheoremReport",
    "held_out_batch",
    "mae_theorem_check",
    "cl_theorem_check",
    "global_dominance",
]


class PhaseLabel(str, Enum):
    P1S1 = "P1S1"
    P1S2 = "P1S2"
    P2S1 = "P2S1"
    P2S2 = "P2S2"
    NEG_S1 = "NEG_S1"
    NEG_S2 = "NEG_S2"
    GLOBAL_S1 = "GLOBAL_S1"
    GLOBAL_S2 = "GLOBAL_S2"
    CONVERGED = "CONVERGED"


POSITIVE_ROUTE = (PhaseLabel.P1S1, PhaseLabel.P1S2, PhaseLabel.P2S1, PhaseLabel.P2S2, PhaseLabel.CONVERGED)
NEGATIVE_ROUTE = (PhaseLabel.NEG_S1, PhaseLabel.NEG_S2, PhaseLabel.CONVERGED)
GLOBAL_ROUTE = (PhaseLabel.GLOBAL_S1, PhaseLabel.GLOBAL_S2, PhaseLabel.CONVERGED)

CROSSING_NAMES = {
    POSITIVE_ROUTE: ("T1", "T1_tilde", "T2", "T2_eps"),
    NEGATIVE_ROUTE: ("T2", "T2_eps"),
    GLOBAL_ROUTE: ("T2", "T2_eps"),
}


@dataclass(frozen=True)
class PhaseThresholds:
    """Constants of the stage boundaries.

    ``epsilon`` is the target accuracy of the final stage, ``offset`` the
    small slack added to the information gap, and the ``c_*`` constants the
    heuristic multiplicative constants of the asymptotic bounds. Every level
    is additionally multiplied by its entry in ``multipliers`` (default 1),
    so that raising a multiplier can only delay a crossing.
    """

    epsilon: float = 0.05
    offset: float = 0.01
    c_gap: float = 1.0
    c_local: float = 1.0
    c_negative: float = 1.0
    c_global: float = 1.0
    multipliers: dict = field(default_factory=dict)

    def scale(self, name: str) -> float:
        return float(self.multipliers.get(name, 1.0))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhaseThresholds":
        return cls(**d)


def threshold_levels(spec: DataSpec, thresholds: PhaseThresholds = PhaseThresholds()) -> dict[str, float]:
    """Numerical values of every stage boundary for this data description.

    Keys: ``global_floor`` (the level the global correlation of a local
    patch falls below), ``gap`` (the width of the own-minus-global gap),
    ``local_rise`` and ``local_saturation`` (own-area correlation of a
    local patch), ``negative_saturation``, ``global_rise`` and
    ``global_saturation``.
    """
    P = spec.num_patches
    logP = math.log(P)
    lo, hi = spec.z_law.low, spec.z_law.high
    if lo <= 0:
        raise ValueError("phase levels need a positive lower latent bound")
    gap = info_gap(spec)
    ks, kc = spec.kappa_s, spec.kappa_c
    eps_factor = math.sqrt(3.0 / thresholds.epsilon) - 1.0
    off = thresholds.offset
    s = thresholds.scale
    return {
        "global_floor": -s("global_floor") * (gap / 2.0 - off) * logP / hi,
        "gap": s("gap") * (gap / (2.0 * lo) + off / lo + thresholds.c_gap * (1.0 - ks) / hi) * logP,
        "local_rise": s("local_rise") * (1.0 - ks) * logP / lo,
        "local_saturation": s("local_saturation") * math.log(thresholds.c_local * eps_factor * spec.num_areas),
        "negative_rise": s("negative_rise") * (1.0 - ks) * logP / lo,
        "negative_saturation": s("negative_saturation")
        * math.log(thresholds.c_negative * eps_factor * P ** (1.0 - ks)),
        "global_rise": s("global_rise") * (1.0 - kc) * logP / lo,
        "global_saturation": s("global_saturation") * math.log(thresholds.c_global * eps_factor * P ** (1.0 - kc)),
    }


@dataclass
class PhaseSeries:
    """Per-step labels of one (patch, cluster) pair and its crossing steps.

    ``crossings`` maps each boundary name to the last step spent before it,
    or ``None`` when the boundary was not reached within the trace. A stage
    that was skipped entirely shares its crossing step with the previous one.
    """

    patch: int
    cluster: int
    route: str
    labels: list[PhaseLabel]
    crossings: dict[str, int | None]
    steps: list[int] = field(default_factory=list)

    @property
    def sequence(self) -> list[str]:
        """Distinct labels in order of first appearance."""
        out: list[str] = []
        for lab in self.labels:
            if not out or out[-1] != lab.value:
                out.append(lab.value)
        return out

    def to_dict(self) -> dict:
        return {
            "patch": self.patch,
            "cluster": self.cluster,
            "route": self.route,
            "sequence": self.sequence,
            "crossings": self.crossings,
        }


class PhaseTracker:
    """Incremental labeller for one (patch, cluster) pair.

    Feed ``update(step, phi_global, phi_target)`` in increasing step order;
    ``series()`` returns the labels so far with their crossing steps.
    """

    def __init__(self, spec: DataSpec, patch: int, cluster: int, thresholds: PhaseThresholds = PhaseThresholds()) -> None:
        lv = threshold_levels(spec, thresholds)
        self.patch, self.cluster = patch, cluster
        if spec.area_of(cluster, patch) == 0:
            self.route, self.name = GLOBAL_ROUTE, "global"
            self.stay = (
                lambda g, o: g <= lv["global_rise"],
                lambda g, o: g <= lv["global_saturation"],
            )
        elif info_gap(spec) > 0:
            self.route, self.name = POSITIVE_ROUTE, "positive"
            self.stay = (
                lambda g, o: g >= lv["global_floor"],
                lambda g, o: o - g <= lv["gap"],
                lambda g, o: o <= lv["local_rise"],
                lambda g, o: o <= lv["local_saturation"],
            )
        else:
            self.route, self.name = NEGATIVE_ROUTE, "negative"
            self.stay = (
                lambda g, o: o <= lv["negative_rise"],
                lambda g, o: o <= lv["negative_saturation"],
            )
        self.stage = 0
        self.steps: list[int] = []
        self.labels: list[PhaseLabel] = []
        self.last_in_stage: list[int | None] = [None] * len(self.stay)

    @property
    def label(self) -> PhaseLabel | None:
        return self.labels[-1] if self.labels else None

    @property
    def converged(self) -> bool:
        return self.stage == len(self.stay)

    def update(self, step: int, phi_global: float, phi_target: float) -> PhaseLabel:
        if self.steps and step <= self.steps[-1]:
            raise ValueError("steps must increase")
        while self.stage < len(self.stay) and not self.stay[self.stage](phi_global, phi_target):
            self.stage += 1
        lab = self.route[self.stage]
        self.steps.append(step)
        self.labels.append(lab)
        if self.stage < len(self.stay):
            self.last_in_stage[self.stage] = step
        return lab

    def series(self) -> "PhaseSeries":
        crossings: dict[str, int | None] = {}
        previous: int | None = -1
        for i, key in enumerate(CROSSING_NAMES[self.route]):
            if self.stage <= i:
                crossings[key] = None
                previous = None
                continue
            val = self.last_in_stage[i]
            crossings[key] = val if val is not None else previous
            previous = crossings[key]
        return PhaseSeries(self.patch, self.cluster, self.name, list(self.labels), crossings, list(self.steps))


def classify_phase(
    phi_global: np.ndarray,
    phi_target: np.ndarray,
    spec: DataSpec,
    patch: int,
    cluster: int,
    thresholds: PhaseThresholds = PhaseThresholds(),
    steps: np.ndarray | None = None,
) -> PhaseSeries:
    """Label every step of one trace.

    ``phi_global[t]`` and ``phi_target[t]`` are the correlations of the
    patch with the global feature and with its own-area feature of
    ``cluster`` (for a global patch the two coincide). ``steps`` gives the
    step number of each entry and defaults to ``0, 1, 2, ...``; the trace
    must start at step 0.
    """
    phi_global = np.asarray(phi_global, dtype=float)
    phi_target = np.asarray(phi_target, dtype=float)
    steps = np.arange(len(phi_global)) if steps is None else np.asarray(steps)
    if len(steps) and steps[0] != 0:
        raise ValueError("trace must start at step 0")
    tracker = PhaseTracker(spec, patch, cluster, thresholds)
    for t, g, o in zip(steps, phi_global, phi_target):
        tracker.update(int(t), float(g), float(o))
    return tracker.series()


# ---------------------------------------------------------------------------
# Attention diversity
# ---------------------------------------------------------------------------


@dataclass
class DiversityReport:
    """Top-n attended keys per query, their grid coordinates and the metric."""

    top_indices: np.ndarray  # (P, n)
    coordinates: np.ndarray  # (P, 2n)
    metric: float
    n: int

    def to_dict(self) -> dict:
        return {"n": self.n, "metric": self.metric}


def diversity_metric(attn: np.ndarray, grid_side: int | None = None, n: int = 10) -> DiversityReport:
    """Mean pairwise distance between the top-n attended positions of queries.

    Each query's ``n`` largest weights (ties to the lower key index) are
    listed in descending weight order, mapped to (row, column) on the square
    patch grid and concatenated. The metric is the mean Euclidean distance
    over all pairs of distinct queries.
    """
    A = np.asarray(attn, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("attention matrix must be square")
    P = A.shape[0]
    side = math.isqrt(P) if grid_side is None else int(grid_side)
    if side * side != P:
        raise ValueError(f"{P} patches do not form a square grid")
    if not 1 <= n <= P:
        raise ValueError("n must lie in [1, P]")
    # stable sort on the negated weights keeps equal weights in index order
    top = np.argsort(-A, axis=1, kind="stable")[:, :n]
    coords = np.stack([top // side, top % side], axis=2).reshape(P, 2 * n).astype(float)
    metric = float(pdist(coords).mean()) if P > 1 else 0.0
    return DiversityReport(top, coords, metric, n)


def mae_attention_matrix(spec: DataSpec, Q: np.ndarray, cluster: int, z: np.ndarray | None = None) -> np.ndarray:
    """Attention of the reconstruction model on an unmasked noiseless image."""
    z = np.full(spec.num_areas, spec.z_law.mean()) if z is None else np.asarray(z, float)
    batch = SampleBatch(np.array([cluster]), z[None], np.ones((1, spec.num_patches), bool), np.ones(1))
    X = batch.contents(spec, masked=False)[0]
    Xt = X + spec.position_basis()
    return softmax_rows(Xt @ Q @ Xt.T)


def cl_attention_matrix(spec: DataSpec, Q: np.ndarray, cluster: int, z: np.ndarray | None = None) -> np.ndarray:
    """Attention of the contrastive model on an unmasked noiseless image."""
    z = np.full(spec.num_areas, spec.z_law.mean()) if z is None else np.asarray(z, float)
    batch = SampleBatch(np.array([cluster]), z[None], np.ones((1, spec.num_patches), bool), np.ones(1))
    X = batch.contents(spec, masked=False)[0]
    return softmax_rows(spec.position_basis() @ Q @ X.T)


def model_diversity(spec: DataSpec, Q: np.ndarray, objective: str, n: int = 10) -> float:
    """Diversity metric averaged over one evaluation image per cluster."""
    build = {"mae": mae_attention_matrix, "cl": cl_attention_matrix}[objective]
    vals = [diversity_metric(build(spec, Q, k), n=min(n, spec.num_patches)).metric for k in range(spec.num_clusters)]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# End-of-training checks
# ---------------------------------------------------------------------------


@dataclass
class PatchCheck:
    patch: int
    values: dict
    passed: bool


@dataclass
class TheoremReport:
    """Per-patch outcomes of an end-of-training check."""

    objective: str
    epsilon: float
    patches: list[PatchCheck]
    summary: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.patches)

    def to_dict(self) -> dict:
        return {
            "objective": self.objective,
            "epsilon": self.epsilon,
            "passed": self.passed,
            "summary": self.summary,
            "patches": [{"patch": c.patch, "passed": c.passed, **c.values} for c in self.patches],
        }


def held_out_batch(spec: DataSpec, patch: int, count: int, ratio: float, rng: np.random.Generator) -> SampleBatch:
    """Fresh (sample, mask) draws conditioned on ``patch`` being masked.

    A uniform mask conditioned on covering ``patch`` is drawn by masking the
    patch and then a uniform subset of the remaining patches.
    """
    P = spec.num_patches
    m = mask_count(P, ratio)
    base = draw_batch(spec, count, ratio, rng)
    others = np.delete(np.arange(P), patch)
    unmasked = np.ones((count, P), dtype=bool)
    unmasked[:, patch] = False
    order = np.argsort(rng.random((count, P - 1)), axis=1)[:, : m - 1]
    unmasked[np.arange(count)[:, None], others[order]] = False
    return SampleBatch(base.cluster, base.z, unmasked, np.full(count, 1.0 / count))


# largest enumerated batch (masks x clusters x latent nodes) the check evaluates exactly
EXACT_CHECK_ROWS = 200_000


def _per_patch_loss(spec: DataSpec, Q: np.ndarray, ratio: float, rng: np.random.Generator, samples: int):
    W = Q[spec.num_features :]
    nodes = len(spec.z_law.quadrature()[0]) ** spec.num_areas
    if enumeration_size(spec, ratio) * nodes <= EXACT_CHECK_ROWS:
        b = enumerate_batch(spec, ratio)
        r = kernels.mae_masked_terms(W, spec.area_index, spec.num_areas, b.cluster, b.z, b.unmasked, b.weight)
        return r.loss, np.zeros_like(r.loss), "exact"
    b = draw_batch(spec, samples, ratio, rng)
    r = kernels.mae_masked_terms(W, spec.area_index, spec.num_areas, b.cluster, b.z, b.unmasked, b.weight)
    # standard error from per-row losses: recompute with unit weights per chunk
    chunks = np.array_split(np.arange(samples), 20)
    parts = []
    for c in chunks:
        sub = b.subset(c)
        rr = kernels.mae_masked_terms(W, spec.area_index, spec.num_areas, sub.cluster, sub.z, sub.unmasked, np.full(len(c), 1.0 / len(c)))
        parts.append(rr.loss)
    parts = np.array(parts)
    return r.loss, parts.std(axis=0, ddof=1) / math.sqrt(len(chunks)), "mc"


def _masked_query_own_attention(spec: DataSpec, W: np.ndarray, batch: SampleBatch, patch: int):
    """Own-area attention of masked query ``patch``: over all keys, and over visible keys."""
    # a masked query is its position vector alone, so one row of W scores every key
    row = W[patch]
    area = spec.area_index[batch.cluster]
    feature = batch.cluster[:, None] * spec.num_areas + area
    value = np.take_along_axis(batch.z, area, axis=1) * batch.unmasked
    logits = row[feature] * value + row[spec.num_features :][None, :]
    attn = softmax_rows(logits)
    same = area == area[:, [patch]]
    return (attn * same).sum(axis=1), (attn * (same & batch.unmasked)).sum(axis=1)


def mae_theorem_check(
    spec: DataSpec,
    Q: np.ndarray,
    ratio: float = 0.5,
    epsilon: float = 0.05,
    locality_factor: float = 2.0,
    patches: list[int] | None = None,
    *,
    num_masks: int = 200,
    loss_samples: int = 20_000,
    seed: int = 0,
) -> TheoremReport:
    """Loss gap and own-area attention of a reconstruction model.

    Per patch: ``L_p - L_low,p <= epsilon`` and the mean of
    ``(1 - Attn_{p -> own area})^2`` over ``num_masks`` held-out masks with
    ``p`` masked is at most ``locality_factor * epsilon``. Area attention
    counts every key of the area, masked ones included, and every held-out
    mask enters the mean. The miss restricted to visible keys is reported
    alongside as ``locality_visible``.
    """
    rng = np.random.default_rng([seed, 3])
    patches = list(range(spec.num_patches)) if patches is None else list(patches)
    loss, stderr, how = _per_patch_loss(spec, Q, ratio, rng, loss_samples)
    W = Q[spec.num_features :]
    out = []
    for p in patches:
        hb = held_out_batch(spec, p, num_masks, ratio, rng)
        own, own_visible = _masked_query_own_attention(spec, W, hb, p)
        miss = float(np.mean((1.0 - own) ** 2))
        gap = float(loss[p] - low_bound(spec, p, ratio))
        ok = gap <= epsilon and miss <= locality_factor * epsilon
        out.append(
            PatchCheck(
                p,
                {
                    "loss": float(loss[p]),
                    "loss_stderr": float(stderr[p]),
                    "low_bound": float(low_bound(spec, p, ratio)),
                    "loss_gap": gap,
                    "locality": miss,
                    "locality_visible": float(np.mean((1.0 - own_visible) ** 2)),
                },
                ok,
            )
        )
    summary = {
        "loss_mode": how,
        "max_loss_gap": max(c.values["loss_gap"] for c in out),
        "max_locality": max(c.values["locality"] for c in out),
        "max_locality_visible": max(c.values["locality_visible"] for c in out),
        "locality_limit": locality_factor * epsilon,
    }
    return TheoremReport("mae", epsilon, out, summary)


def global_dominance(fp_trace: np.ndarray, spec: DataSpec) -> tuple[bool, float]:
    """Whether ``Phi_global >= Phi_m`` for every m > 1 at every logged step.

    ``fp_trace`` has shape (T, P, K, N). Returns the verdict and the smallest
    margin ``Phi_global - max_m Phi_m`` over all steps, patches and clusters.
    """
    fp = np.asarray(fp_trace)
    if spec.num_areas < 2:
        return True, float("inf")
    margin = fp[..., 0] - fp[..., 1:].max(axis=-1)
    worst = float(margin.min())
    return worst >= 0.0, worst


def cl_theorem_check(
    spec: DataSpec,
    Q: np.ndarray,
    fp_trace: np.ndarray,
    *,
    ratio: float = 0.5,
    noise: float | None = None,
    num_samples: int = 20,
    concentration: float = 0.1,
    required: int = 19,
    seed: int = 0,
) -> TheoremReport:
    """Global concentration and FP ordering of a contrastive model.

    For every patch, ``1 - Attn_{p -> global area}`` is evaluated on
    ``num_samples`` held-out augmented views; the patch passes when at least
    ``required`` of them are within ``concentration`` and the global FP
    correlation dominated every other one at every logged step.
    """
    from .cl import default_noise, draw_cl_batch

    rng = np.random.default_rng([seed, 4])
    noise = default_noise(spec.dim) if noise is None else noise
    b = draw_cl_batch(spec, num_samples, ratio, noise, 1, rng)
    W = Q[spec.num_features :]
    scores = softmax_rows(np.einsum("pi,bqi->bpq", W, b.plus))
    glob = np.stack([area_attention(scores[i], spec.area_index[b.cluster[i]], spec.num_areas)[:, 0] for i in range(num_samples)])
    miss = 1.0 - glob  # (S, P)
    ordered, margin = global_dominance(fp_trace, spec)
    per_patch_margin = (np.asarray(fp_trace)[..., 0] - np.asarray(fp_trace)[..., 1:].max(axis=-1)).min(axis=(0, 2))
    out = []
    for p in range(spec.num_patches):
        hits = int(np.sum(miss[:, p] <= concentration))
        ok = hits >= required and per_patch_margin[p] >= 0
        out.append(
            PatchCheck(
                p,
                {
                    "concentrated_samples": hits,
                    "median_global_miss": float(np.median(miss[:, p])),
                    "ordering_margin": float(per_patch_margin[p]),
                },
                bool(ok),
            )
        )
    summary = {
        "ordering_holds": ordered,
        "ordering_margin": margin,
        "min_concentrated_samples": min(c.values["concentrated_samples"] for c in out),
        "required": required,
        "num_samples": num_samples,
        "median_global_miss": float(np.median(miss)),
    }
    return TheoremReport("cl", concentration, out, summary)
