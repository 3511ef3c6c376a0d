"""Clustered-patch data distribution, masking, augmentation and noise.

Every image has ``P`` patches. A sample is drawn by choosing a cluster ``k``
uniformly, then one latent scale ``z_j`` per area of that cluster. Patch
``p`` then carries the content ``z_{a(k,p)} * v_{k,a(k,p)}``, where area 0
is the large global area and the remaining areas are small local ones.

The feature vectors ``v_{k,j}`` and positional encodings ``e_p`` are blocks
of the standard basis of R^d: features occupy coordinates ``[0, K*N)`` and
positions occupy ``[K*N, K*N + P)``.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterator

import numpy as np
from scipy.special import comb

__all__ = [
    "SpecError",
    "ZLaw",
    "DataSpec",
    "Sample",
    "MaskedSample",
    "NoisySample",
    "SampleBatch",
    "build_spec",
    "info_gap",
    "draw_sample",
    "draw_batch",
    "apply_mask",
    "augment_pair",
    "add_noise",
    "mask_count",
    "enumerate_batch",
    "enumeration_size",
    "full_area_mask_probability",
]


class SpecError(ValueError):
    """Raised when a data configuration violates the model's structure."""


# ---------------------------------------------------------------------------
# Latent law
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ZLaw:
    """Law of the per-area latent scale ``z``.

    ``kind="uniform"`` draws from U[low, high]; ``kind="point"`` is a point
    mass at ``low`` (``high`` must equal ``low``).
    """

    kind: str = "uniform"
    low: float = 0.8
    high: float = 1.2

    def __post_init__(self) -> None:
        if self.kind not in ("uniform", "point"):
            raise SpecError(f"unknown z law {self.kind!r}")
        if self.low < 0:
            raise SpecError("z law support must be non-negative")
        if self.kind == "uniform" and not self.low < self.high:
            raise SpecError("uniform z law needs low < high")
        if self.kind == "point" and self.low != self.high:
            raise SpecError("point z law needs low == high")

    @classmethod
    def point(cls, value: float = 1.0) -> "ZLaw":
        return cls("point", value, value)

    def sample(self, rng: np.random.Generator, size: Any) -> np.ndarray:
        if self.kind == "point":
            return np.full(size, self.low, dtype=float)
        return rng.uniform(self.low, self.high, size=size)

    def mean(self) -> float:
        return 0.5 * (self.low + self.high)

    def second_moment(self) -> float:
        lo, hi = self.low, self.high
        return (lo * lo + lo * hi + hi * hi) / 3.0

    def quadrature(self) -> tuple[np.ndarray, np.ndarray]:
        """Nodes and weights treated as the exact law by the enumerator.

        Point mass: one node. Uniform: 3-point Gauss-Legendre on [low, high],
        which reproduces every moment up to order five.
        """
        if self.kind == "point":
            return np.array([self.low]), np.array([1.0])
        mid = 0.5 * (self.low + self.high)
        half = 0.5 * (self.high - self.low)
        r = math.sqrt(3.0 / 5.0)
        nodes = np.array([mid - half * r, mid, mid + half * r])
        weights = np.array([5.0, 8.0, 5.0]) / 18.0
        return nodes, weights

    def to_dict(self) -> dict:
        return {"kind": self.kind, "low": self.low, "high": self.high}

    @classmethod
    def from_dict(cls, d: dict) -> "ZLaw":
        return cls(str(d["kind"]), float(d["low"]), float(d["high"]))


# ---------------------------------------------------------------------------
# Distribution description
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DataSpec:
    """Complete description of the clustered-patch distribution.

    ``area_index[k, p]`` is the area of patch ``p`` in cluster ``k``; area 0
    is the global area. Every cluster shares the same list of area sizes.
    """

    num_patches: int
    num_clusters: int
    area_sizes: tuple[int, ...]
    area_index: np.ndarray
    z_law: ZLaw = field(default_factory=ZLaw)
    seed: int = 0
    contiguous: bool = False

    def __post_init__(self) -> None:
        idx = np.asarray(self.area_index, dtype=np.int64)
        object.__setattr__(self, "area_index", idx)
        idx.setflags(write=False)
        P, K, N = self.num_patches, self.num_clusters, len(self.area_sizes)
        if idx.shape != (K, P):
            raise SpecError(f"area_index must have shape {(K, P)}, got {idx.shape}")
        if N < 2:
            raise SpecError("need a global area and at least one local area")
        if sum(self.area_sizes) != P:
            raise SpecError("area sizes must add up to the patch count")
        if any(self.area_sizes[0] <= c for c in self.area_sizes[1:]):
            raise SpecError("the global area must be strictly the largest")
        for k in range(K):
            counts = np.bincount(idx[k], minlength=N)
            if len(counts) != N or tuple(int(c) for c in counts) != tuple(self.area_sizes):
                raise SpecError(f"cluster {k} partition does not match area sizes")

    # --- sizes and exponents -------------------------------------------------

    @property
    def num_areas(self) -> int:
        return len(self.area_sizes)

    @property
    def num_features(self) -> int:
        return self.num_clusters * self.num_areas

    @property
    def dim(self) -> int:
        return self.num_features + self.num_patches

    @property
    def global_size(self) -> int:
        return self.area_sizes[0]

    @property
    def local_size(self) -> int:
        """Nominal local-area size (the first local area)."""
        return self.area_sizes[1]

    @property
    def kappa_c(self) -> float:
        return math.log(self.global_size) / math.log(self.num_patches)

    @property
    def kappa_s(self) -> float:
        return math.log(self.local_size) / math.log(self.num_patches)

    # --- bases ---------------------------------------------------------------

    def feature_index(self, cluster: int, area: int) -> int:
        return cluster * self.num_areas + area

    def position_index(self, patch: int) -> int:
        return self.num_features + patch

    def feature_vector(self, cluster: int, area: int) -> np.ndarray:
        v = np.zeros(self.dim)
        v[self.feature_index(cluster, area)] = 1.0
        return v

    def position_vector(self, patch: int) -> np.ndarray:
        e = np.zeros(self.dim)
        e[self.position_index(patch)] = 1.0
        return e

    def feature_basis(self) -> np.ndarray:
        """Array of shape (K, N, d) with ``v_{k,j}`` in slot ``[k, j]``."""
        eye = np.eye(self.dim)
        return eye[: self.num_features].reshape(self.num_clusters, self.num_areas, self.dim)

    def position_basis(self) -> np.ndarray:
        """Array of shape (P, d) whose row ``p`` is ``e_p``."""
        return np.eye(self.dim)[self.num_features :]

    def areas(self, cluster: int) -> list[np.ndarray]:
        row = self.area_index[cluster]
        return [np.flatnonzero(row == j) for j in range(self.num_areas)]

    def area_of(self, cluster: int, patch: int) -> int:
        return int(self.area_index[cluster, patch])

    def local_clusters(self, patch: int) -> list[int]:
        """Clusters in which ``patch`` lies in a local area."""
        return [k for k in range(self.num_clusters) if self.area_index[k, patch] > 0]

    def global_clusters(self, patch: int) -> list[int]:
        """Clusters in which ``patch`` lies in the global area."""
        return [k for k in range(self.num_clusters) if self.area_index[k, patch] == 0]

    # --- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "num_patches": self.num_patches,
            "num_clusters": self.num_clusters,
            "area_sizes": list(self.area_sizes),
            "partitions": [[a.tolist() for a in self.areas(k)] for k in range(self.num_clusters)],
            "kappa_c": self.kappa_c,
            "kappa_s": self.kappa_s,
            "z_law": self.z_law.to_dict(),
            "seed": self.seed,
            "contiguous": self.contiguous,
        }

    def to_json(self, **kwargs: Any) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, d: dict) -> "DataSpec":
        P, K = int(d["num_patches"]), int(d["num_clusters"])
        idx = np.full((K, P), -1, dtype=np.int64)
        for k, areas in enumerate(d["partitions"]):
            for j, members in enumerate(areas):
                idx[k, members] = j
        return cls(
            num_patches=P,
            num_clusters=K,
            area_sizes=tuple(int(c) for c in d["area_sizes"]),
            area_index=idx,
            z_law=ZLaw.from_dict(d["z_law"]),
            seed=int(d.get("seed", 0)),
            contiguous=bool(d.get("contiguous", False)),
        )

    @classmethod
    def from_json(cls, text: str) -> "DataSpec":
        return cls.from_dict(json.loads(text))


def _area_sizes(P: int, global_size: int, local_size: int) -> tuple[int, ...]:
    if global_size >= P:
        raise SpecError(f"global area size {global_size} leaves no room for local areas (P={P})")
    if local_size < 1:
        raise SpecError("local area size must be at least 1")
    if global_size <= local_size:
        raise SpecError("global area must be larger than the local areas")
    n_local = (P - global_size) // local_size
    if n_local < 1:
        raise SpecError("not enough patches for a single local area")
    sizes = [global_size] + [local_size] * n_local
    sizes[-1] += (P - global_size) - n_local * local_size
    if sizes[-1] >= global_size:
        raise SpecError("remainder makes the last local area as large as the global area")
    return tuple(sizes)


def build_spec(
    num_patches: int,
    num_clusters: int = 1,
    kappa_c: float | None = None,
    kappa_s: float | None = None,
    *,
    global_size: int | None = None,
    local_size: int | None = None,
    z_law: ZLaw | None = None,
    seed: int = 0,
    contiguous: bool = False,
) -> DataSpec:
    """Construct a DataSpec from exponents or from explicit area sizes.

    With exponents, the global size is ``round(P**kappa_c)`` and the local
    size ``round(P**kappa_s)``. The ``P - C1`` non-global patches are split
    into ``(P - C1) // Cs`` local areas, the last one absorbing any
    remainder. Each cluster gets an independent random partition.

    >>> spec = build_spec(64, 2, 0.9, 0.35)
    >>> spec.area_sizes
    (42, 4, 4, 4, 4, 6)
    """
    P, K = int(num_patches), int(num_clusters)
    if P < 4:
        raise SpecError("need at least 4 patches")
    if K < 1:
        raise SpecError("need at least one cluster")
    if global_size is not None or local_size is not None:
        if global_size is None or local_size is None:
            raise SpecError("explicit sizes need both global_size and local_size")
        c1, cs = int(global_size), int(local_size)
    else:
        if kappa_c is None or kappa_s is None:
            raise SpecError("give either both exponents or both explicit sizes")
        if not (0.0 < kappa_s < kappa_c <= 1.0):
            raise SpecError("exponents must satisfy 0 < kappa_s < kappa_c <= 1")
        c1, cs = round(P**kappa_c), round(P**kappa_s)
    sizes = _area_sizes(P, c1, cs)

    rng = np.random.default_rng([seed, 0])
    idx = np.empty((K, P), dtype=np.int64)
    labels = np.repeat(np.arange(len(sizes)), sizes)
    for k in range(K):
        if contiguous:
            order = np.roll(np.arange(P), int(rng.integers(P)))
        else:
            order = rng.permutation(P)
        idx[k, order] = labels
    return DataSpec(P, K, sizes, idx, z_law or ZLaw(), seed, contiguous)


def info_gap(spec: DataSpec) -> float:
    """Global/local imbalance ``(1 - kappa_s) - 2 (1 - kappa_c)``."""
    return (1.0 - spec.kappa_s) - 2.0 * (1.0 - spec.kappa_c)


# ---------------------------------------------------------------------------
# Samples
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Sample:
    """One noiseless image: cluster id plus one latent per area."""

    spec: DataSpec
    cluster: int
    z: np.ndarray

    @property
    def area_of(self) -> np.ndarray:
        return self.spec.area_index[self.cluster]

    @property
    def contents(self) -> np.ndarray:
        """Patch contents as a (P, d) array."""
        spec = self.spec
        X = np.zeros((spec.num_patches, spec.dim))
        areas = self.area_of
        cols = self.cluster * spec.num_areas + areas
        X[np.arange(spec.num_patches), cols] = self.z[areas]
        return X


@dataclass(frozen=True, eq=False)
class NoisySample:
    """A sample with i.i.d. Gaussian noise added to every patch."""

    base: Sample
    noise: np.ndarray

    @property
    def spec(self) -> DataSpec:
        return self.base.spec

    @property
    def cluster(self) -> int:
        return self.base.cluster

    @property
    def contents(self) -> np.ndarray:
        return self.base.contents + self.noise


@dataclass(frozen=True, eq=False)
class MaskedSample:
    """A (possibly noisy) sample whose masked patches are zeroed."""

    base: Sample | NoisySample
    unmasked: np.ndarray

    @property
    def spec(self) -> DataSpec:
        return self.base.spec

    @property
    def cluster(self) -> int:
        return self.base.cluster

    @property
    def mask_set(self) -> np.ndarray:
        return np.flatnonzero(~self.unmasked)

    @property
    def unmasked_set(self) -> np.ndarray:
        return np.flatnonzero(self.unmasked)

    @property
    def contents(self) -> np.ndarray:
        return self.base.contents * self.unmasked[:, None]


def mask_count(num_patches: int, ratio: float) -> int:
    """Number of masked patches, ``round(ratio * P)`` with halves rounded up."""
    if not 0.0 < ratio < 1.0:
        raise SpecError("masking ratio must lie in (0, 1)")
    m = int(math.floor(ratio * num_patches + 0.5))
    if m in (0, num_patches):
        raise SpecError(f"masking ratio {ratio} masks {m} of {num_patches} patches")
    return m


def draw_sample(spec: DataSpec, rng: np.random.Generator) -> Sample:
    k = int(rng.integers(spec.num_clusters))
    z = spec.z_law.sample(rng, spec.num_areas)
    return Sample(spec, k, z)


def _random_unmasked(P: int, m: int, rng: np.random.Generator, rows: int) -> np.ndarray:
    order = np.argsort(rng.random((rows, P)), axis=1)
    unmasked = np.ones((rows, P), dtype=bool)
    np.put_along_axis(unmasked, order[:, :m], False, axis=1)
    return unmasked


def apply_mask(sample: Sample | NoisySample, ratio: float, rng: np.random.Generator) -> MaskedSample:
    """Zero a uniformly random subset of ``round(ratio * P)`` patches."""
    P = sample.spec.num_patches
    m = mask_count(P, ratio)
    return MaskedSample(sample, _random_unmasked(P, m, rng, 1)[0])


def augment_pair(
    sample: Sample | NoisySample, ratio: float, rng: np.random.Generator
) -> tuple[MaskedSample, MaskedSample]:
    """Two views of the same sample under independent random masks."""
    return apply_mask(sample, ratio, rng), apply_mask(sample, ratio, rng)


def add_noise(sample: Sample, sigma2: float, rng: np.random.Generator) -> NoisySample:
    """Add N(0, sigma2) noise to every coordinate of every patch."""
    spec = sample.spec
    noise = rng.normal(0.0, math.sqrt(sigma2), size=(spec.num_patches, spec.dim))
    return NoisySample(sample, noise)


# ---------------------------------------------------------------------------
# Compact batches
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SampleBatch:
    """Compact description of many (cluster, latents, mask) triples.

    ``weight`` holds each row's probability weight; Monte Carlo batches use
    ``1/B`` per row, enumerated batches use exact probabilities.
    """

    cluster: np.ndarray
    z: np.ndarray
    unmasked: np.ndarray
    weight: np.ndarray

    def __len__(self) -> int:
        return int(self.cluster.shape[0])

    def sample(self, spec: DataSpec, row: int) -> MaskedSample:
        base = Sample(spec, int(self.cluster[row]), self.z[row])
        return MaskedSample(base, self.unmasked[row])

    def contents(self, spec: DataSpec, masked: bool = True) -> np.ndarray:
        """Dense (B, P, d) contents, zeroed on masked patches if ``masked``."""
        B, P = self.unmasked.shape
        area = spec.area_index[self.cluster]
        cols = self.cluster[:, None] * spec.num_areas + area
        vals = np.take_along_axis(self.z, area, axis=1)
        if masked:
            vals = vals * self.unmasked
        X = np.zeros((B, P, spec.dim))
        X[np.arange(B)[:, None], np.arange(P)[None, :], cols] = vals
        return X

    def subset(self, rows: np.ndarray) -> "SampleBatch":
        return SampleBatch(self.cluster[rows], self.z[rows], self.unmasked[rows], self.weight[rows])


def draw_batch(spec: DataSpec, size: int, ratio: float, rng: np.random.Generator) -> SampleBatch:
    """Monte Carlo batch of ``size`` independent (sample, mask) draws."""
    P = spec.num_patches
    m = mask_count(P, ratio)
    cluster = rng.integers(spec.num_clusters, size=size)
    z = spec.z_law.sample(rng, (size, spec.num_areas))
    unmasked = _random_unmasked(P, m, rng, size)
    return SampleBatch(cluster.astype(np.int64), z, unmasked, np.full(size, 1.0 / size))


def enumeration_size(spec: DataSpec, ratio: float) -> int:
    """Masks times clusters, the quantity capped for exact enumeration."""
    return int(comb(spec.num_patches, mask_count(spec.num_patches, ratio), exact=True)) * spec.num_clusters


def iter_masks(num_patches: int, masked: int) -> Iterator[np.ndarray]:
    for combo in itertools.combinations(range(num_patches), masked):
        unmasked = np.ones(num_patches, dtype=bool)
        unmasked[list(combo)] = False
        yield unmasked


def enumerate_batch(spec: DataSpec, ratio: float, cap: int = 100_000) -> SampleBatch:
    """Every mask x cluster x latent-quadrature node, with exact weights."""
    size = enumeration_size(spec, ratio)
    if size > cap:
        raise SpecError(f"exact enumeration needs {size} mask-cluster pairs (cap {cap})")
    P, K, N = spec.num_patches, spec.num_clusters, spec.num_areas
    masks = np.array(list(iter_masks(P, mask_count(P, ratio))))
    nodes, wts = spec.z_law.quadrature()
    z_grid = np.array(list(itertools.product(nodes, repeat=N)))
    w_grid = np.prod(np.array(list(itertools.product(wts, repeat=N))), axis=1)
    M, Z = masks.shape[0], z_grid.shape[0]
    cluster = np.repeat(np.arange(K, dtype=np.int64), M * Z)
    unmasked = np.tile(np.repeat(masks, Z, axis=0), (K, 1))
    z = np.tile(z_grid, (K * M, 1))
    weight = np.tile(w_grid, K * M) / (K * M)
    return SampleBatch(cluster, z, unmasked, weight)


def full_area_mask_probability(num_patches: int, area_size: int, ratio: float) -> float:
    """Probability that a uniformly random mask covers a whole area.

    Equals ``C(P - C, |U|) / C(P, |U|)``: every unmasked patch avoids the area.
    """
    P = num_patches
    u = P - mask_count(P, ratio)
    return float(comb(P - area_size, u, exact=True)) / float(comb(P, u, exact=True))
