import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from vitssl.data import (
    DataSpec,
    SpecError,
    ZLaw,
    add_noise,
    apply_mask,
    augment_pair,
    build_spec,
    draw_batch,
    draw_sample,
    enumerate_batch,
    full_area_mask_probability,
    info_gap,
    mask_count,
)


def test_sizes_at_64_patches():
    spec = build_spec(64, 2, 0.9, 0.35)
    assert spec.area_sizes == (42, 4, 4, 4, 4, 6)
    assert spec.num_areas == 6
    assert spec.global_size == 42 and spec.local_size == 4
    assert spec.dim == 2 * 6 + 64


def test_global_area_filling_everything_is_rejected():
    with pytest.raises(SpecError):
        build_spec(64, 1, 1.0, 0.35)


def test_explicit_sizes_and_effective_exponent():
    spec = build_spec(8, 1, global_size=4, local_size=2)
    assert spec.area_sizes == (4, 2, 2)
    assert spec.kappa_c == pytest.approx(math.log(4) / math.log(8))
    assert spec.kappa_c == pytest.approx(0.667, abs=1e-3)


@pytest.mark.parametrize(
    "kc, ks, expected",
    [(0.9, 0.35, 0.45), (1.0, 1.0, 0.0), (0.6, 0.45, -0.25)],
)
def test_information_gap_values(kc, ks, expected):
    # uses the exponents directly so the check does not depend on rounding of sizes
    class Exponents:
        kappa_c = kc
        kappa_s = ks

    assert info_gap(Exponents()) == pytest.approx(expected, abs=1e-12)


@given(st.floats(0.5, 0.9), st.floats(0.1, 0.4), st.floats(0.0, 0.05))
def test_information_gap_moves_twice_as_fast_as_global_exponent(kc, ks, delta):
    class A:
        kappa_c, kappa_s = kc, ks

    class B:
        kappa_c, kappa_s = kc + delta, ks

    assert info_gap(B()) - info_gap(A()) == pytest.approx(2 * delta, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(
    P=st.integers(16, 200),
    K=st.integers(1, 4),
    kc=st.floats(0.75, 0.95),
    ks=st.floats(0.2, 0.5),
    seed=st.integers(0, 1000),
    contiguous=st.booleans(),
)
def test_generated_partitions_cover_every_patch_once(P, K, kc, ks, seed, contiguous):
    try:
        spec = build_spec(P, K, kc, ks, seed=seed, contiguous=contiguous)
    except SpecError:
        return
    assert sum(spec.area_sizes) == P
    for k in range(K):
        counts = np.bincount(spec.area_index[k], minlength=spec.num_areas)
        assert tuple(counts) == spec.area_sizes
    assert all(spec.area_sizes[0] > c for c in spec.area_sizes[1:])
    assert spec.dim >= K * spec.num_areas + P


def test_basis_is_orthonormal():
    spec = build_spec(27, 3, 0.9, 0.35, seed=4)
    basis = np.vstack([spec.feature_basis().reshape(-1, spec.dim), spec.position_basis()])
    assert basis.shape == (spec.dim, spec.dim)
    assert np.max(np.abs(basis @ basis.T - np.eye(spec.dim))) <= 1e-12


def test_round_trip_through_json():
    spec = build_spec(16, 2, global_size=8, local_size=3, z_law=ZLaw(low=0.7, high=1.1), seed=9)
    back = DataSpec.from_json(spec.to_json())
    assert back.area_sizes == spec.area_sizes
    assert np.array_equal(back.area_index, spec.area_index)
    assert back.z_law == spec.z_law


def test_samples_repeat_content_within_an_area_and_norms_stay_in_range():
    spec = build_spec(64, 2, 0.9, 0.35)
    rng = np.random.default_rng(1)
    for _ in range(20):
        s = draw_sample(spec, rng)
        X = s.contents
        norms = np.linalg.norm(X, axis=1)
        assert np.all((norms >= 0.8) & (norms <= 1.2))
        for a in range(spec.num_areas):
            rows = X[s.area_of == a]
            assert np.array_equal(rows, np.repeat(rows[:1], len(rows), axis=0))


def test_point_law_gives_unit_norms_and_single_cluster_is_always_zero():
    spec = build_spec(16, 1, global_size=8, local_size=4, z_law=ZLaw.point(1.0))
    rng = np.random.default_rng(0)
    for _ in range(10):
        s = draw_sample(spec, rng)
        assert s.cluster == 0
        assert np.all(np.linalg.norm(s.contents, axis=1) == 1.0)


def test_cluster_frequencies_are_uniform():
    spec = build_spec(16, 4, global_size=8, local_size=4)
    rng = np.random.default_rng(2)
    n = 100_000
    counts = np.bincount(draw_batch(spec, n, 0.5, rng).cluster, minlength=4)
    sd = math.sqrt(n * 0.25 * 0.75)
    assert np.all(np.abs(counts - n / 4) <= 3 * sd)


def test_mask_size_is_fixed_and_unmasked_contents_are_untouched():
    spec = build_spec(8, 1, global_size=4, local_size=2)
    rng = np.random.default_rng(3)
    for _ in range(50):
        s = draw_sample(spec, rng)
        m = apply_mask(s, 0.5, rng)
        assert len(m.mask_set) == 4 and len(m.unmasked_set) == 4
        assert np.all(m.contents[m.mask_set] == 0.0)
        assert np.array_equal(m.contents[m.unmasked_set], s.contents[m.unmasked_set])
        assert set(m.mask_set) | set(m.unmasked_set) == set(range(8))


def test_mask_count_rounds_halves_up_and_rejects_degenerate_ratios():
    assert mask_count(10, 0.25) == 3
    assert mask_count(64, 0.5) == 32
    with pytest.raises(SpecError):
        mask_count(8, 0.05)
    with pytest.raises(SpecError):
        mask_count(8, 1.0)


def test_visible_count_per_area_follows_hypergeometric_law():
    spec = build_spec(64, 2, 0.9, 0.35, seed=0)
    rng = np.random.default_rng(11)
    b = draw_batch(spec, 100_000, 0.5, rng)
    area = spec.area_index[b.cluster] == 1
    visible = np.sum(area & b.unmasked, axis=1)
    C = spec.area_sizes[1]
    pmf = stats.hypergeom(64, C, 32).pmf(np.arange(C + 1))
    observed = np.bincount(visible, minlength=C + 1)
    chi2, p = stats.chisquare(observed, pmf * len(visible))
    assert p > 0.01


def test_full_area_probability_matches_hand_value():
    assert full_area_mask_probability(8, 2, 0.5) == pytest.approx(15 / 70, abs=1e-15)


def test_two_views_use_independent_masks_with_overlap_proportional_to_area():
    spec = build_spec(64, 1, 0.9, 0.35, seed=0)
    rng = np.random.default_rng(5)
    s = draw_sample(spec, rng)
    overlaps = {a: [] for a in range(spec.num_areas)}
    same = 0
    for _ in range(2000):
        u1, u2 = augment_pair(s, 0.5, rng)
        same += np.array_equal(u1.unmasked, u2.unmasked)
        for a in range(spec.num_areas):
            overlaps[a].append(np.sum(u1.unmasked & u2.unmasked & (s.area_of == a)))
    assert same == 0
    for a, size in enumerate(spec.area_sizes):
        # expected overlap is C * (1/2) * (31/63) for two independent half masks
        expected = size * 0.5 * 31 / 63
        assert np.mean(overlaps[a]) == pytest.approx(expected, rel=0.1)


def test_noise_energy_per_patch():
    spec = build_spec(16, 1, global_size=8, local_size=4)
    rng = np.random.default_rng(6)
    sigma2 = 1.0 / spec.dim
    energies = []
    for _ in range(700):
        ns = add_noise(draw_sample(spec, rng), sigma2, rng)
        energies.append(np.sum(ns.noise**2, axis=1))
    energies = np.concatenate(energies)
    assert energies.size >= 10_000
    assert np.mean(energies) == pytest.approx(sigma2 * spec.dim, rel=0.05)


def test_enumerated_weights_sum_to_one():
    spec = build_spec(8, 2, global_size=6, local_size=2, z_law=ZLaw(low=0.8, high=1.2))
    b = enumerate_batch(spec, 0.5)
    assert len(b) == 2 * 70 * 9
    assert b.weight.sum() == pytest.approx(1.0, abs=1e-14)
    with pytest.raises(SpecError):
        enumerate_batch(spec, 0.5, cap=100)
