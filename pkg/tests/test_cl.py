import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vitssl.attention import AttentionWeights, DivergenceError, extract_correlations
from vitssl.cl import (
    ClTrainer,
    cl_forward,
    cl_gradient,
    cl_loss,
    cl_similarity,
    cl_step,
    default_regularization,
    default_temperature,
    draw_cl_batch,
    exact_cl_batch,
)
from vitssl.data import Sample, SpecError, ZLaw, apply_mask, build_spec, draw_sample
from vitssl.oracle import direct_cl_loss, fd_gradient, relative_error


@pytest.fixture(scope="module")
def tiny():
    return build_spec(8, 4, global_size=6, local_size=2, z_law=ZLaw.point(1.0), seed=0)


# ---------------------------------------------------------------------------
# forward and similarity
# ---------------------------------------------------------------------------


def test_zero_matrix_pools_to_the_mean(tiny):
    rng = np.random.default_rng(0)
    X = draw_sample(tiny, rng).contents + rng.normal(0, 0.1, (8, tiny.dim))
    assert np.allclose(cl_forward(X, np.zeros((tiny.dim, tiny.dim))), X.mean(axis=0), atol=1e-15)


def test_identical_keys_pool_to_the_shared_vector():
    # every patch carries the same unit vector, so the attention pattern cannot matter
    spec = build_spec(8, 1, global_size=6, local_size=2, z_law=ZLaw.point(1.0))
    X = np.tile(spec.feature_vector(0, 0), (8, 1))
    rng = np.random.default_rng(1)
    out = cl_forward(X, rng.normal(0, 3, (spec.dim, spec.dim)))
    assert np.allclose(out, spec.feature_vector(0, 0), atol=1e-14)
    assert cl_similarity(X, X, rng.normal(size=(spec.dim, spec.dim))) == pytest.approx(1.0, abs=1e-14)


def test_masked_view_at_zero_sums_visible_patches(tiny):
    rng = np.random.default_rng(2)
    view = apply_mask(draw_sample(tiny, rng), 0.5, rng)
    out = cl_forward(view.contents, np.zeros((tiny.dim, tiny.dim)))
    expected = view.base.contents[view.unmasked_set].sum(axis=0) / 8
    assert np.allclose(out, expected, atol=1e-15)


def test_stacked_inputs_match_one_at_a_time(tiny):
    rng = np.random.default_rng(3)
    Q = rng.normal(0, 0.5, (tiny.dim, tiny.dim))
    stack = np.stack([draw_sample(tiny, rng).contents for _ in range(4)])
    together = cl_forward(stack, Q)
    for i in range(4):
        assert np.allclose(together[i], cl_forward(stack[i], Q), atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_similarity_is_symmetric(tiny, seed):
    rng = np.random.default_rng(seed)
    Q = rng.normal(0, 1, (tiny.dim, tiny.dim))
    a = draw_sample(tiny, rng).contents + rng.normal(0, 0.2, (8, tiny.dim))
    b = draw_sample(tiny, rng).contents + rng.normal(0, 0.2, (8, tiny.dim))
    assert cl_similarity(a, b, Q) == pytest.approx(cl_similarity(b, a, Q), abs=1e-14)


def test_cross_cluster_noiseless_pair_has_zero_similarity(tiny):
    a = Sample(tiny, 0, np.ones(tiny.num_areas)).contents
    b = Sample(tiny, 1, np.ones(tiny.num_areas)).contents
    assert cl_similarity(a, b, np.zeros((tiny.dim, tiny.dim))) == 0.0


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def mc_batch():
    spec = build_spec(16, 4, global_size=8, local_size=3, seed=2)
    rng = np.random.default_rng(4)
    return spec, draw_cl_batch(spec, 64, 0.5, 1.0 / spec.dim, 8, rng)


def test_equal_similarities_give_log_of_the_pool_size(tiny):
    batch = exact_cl_batch(tiny, 0.5, 8)
    # with all-zero contents every similarity is zero
    zero = type(batch)(
        batch.plus * 0, batch.plusplus * 0, batch.negatives * 0, batch.negative_index, batch.cluster,
        batch.negative_cluster, batch.unmasked_plus, batch.unmasked_plusplus, batch.weight,
    )
    tau = 0.3
    rep = cl_loss(zero, np.zeros((tiny.dim, tiny.dim)), tau, 0.0)
    assert rep.infonce == pytest.approx(tau * math.log(9), abs=1e-12)


def test_without_weight_decay_the_total_is_the_infonce_term(mc_batch):
    spec, batch = mc_batch
    rep = cl_loss(batch, np.zeros((spec.dim, spec.dim)), 0.4, 0.0)
    assert rep.total == rep.infonce and rep.regularizer == 0.0


def test_weight_decay_term_is_half_the_squared_norm(mc_batch):
    spec, batch = mc_batch
    rng = np.random.default_rng(5)
    Q = rng.normal(size=(spec.dim, spec.dim))
    rep = cl_loss(batch, Q, 0.4, 0.01)
    assert rep.regularizer == pytest.approx(0.005 * np.sum(Q**2), rel=1e-14)


def test_softmax_scores_form_a_distribution(mc_batch):
    spec, batch = mc_batch
    rng = np.random.default_rng(6)
    rep = cl_loss(batch, rng.normal(0, 2, (spec.dim, spec.dim)), 0.2, 0.0)
    totals = rep.ell_pos + rep.ell_neg.sum(axis=1)
    assert np.max(np.abs(totals - 1)) <= 1e-12
    assert np.all(rep.ell_pos >= 0) and np.all(rep.ell_neg >= 0)


def test_scores_are_unchanged_when_temperature_and_similarities_scale_together(mc_batch):
    spec, batch = mc_batch
    rng = np.random.default_rng(7)
    Q = rng.normal(0, 0.5, (spec.dim, spec.dim))
    # scaling every content by c scales every similarity by c^2 at Q = 0
    c = 1.7
    scaled = type(batch)(
        batch.plus * c, batch.plusplus * c, batch.negatives * c, batch.negative_index, batch.cluster,
        batch.negative_cluster, batch.unmasked_plus, batch.unmasked_plusplus, batch.weight,
    )
    Q0 = np.zeros_like(Q)
    a = cl_loss(batch, Q0, 0.3, 0.0)
    b = cl_loss(scaled, Q0, 0.3 * c**2, 0.0)
    assert np.allclose(a.ell_pos, b.ell_pos, atol=1e-13)


def test_invalid_hyperparameters_and_empty_negatives_are_rejected(mc_batch):
    spec, batch = mc_batch
    Q = np.zeros((spec.dim, spec.dim))
    with pytest.raises(ValueError):
        cl_loss(batch, Q, 0.0, 0.0)
    with pytest.raises(ValueError):
        cl_loss(batch, Q, 0.1, -1.0)
    with pytest.raises(ValueError):
        type(batch)(
            batch.plus, batch.plusplus, batch.negatives, batch.negative_index[:, :0], batch.cluster,
            batch.negative_cluster, batch.unmasked_plus, batch.unmasked_plusplus, batch.weight,
        )


def test_negatives_are_never_masked(mc_batch):
    spec, batch = mc_batch
    norms = np.linalg.norm(batch.negatives, axis=2)
    assert np.all(norms > 0)
    assert np.all(batch.plus[~batch.unmasked_plus] == 0)


def test_defaults_follow_the_dimension_and_patch_count():
    assert default_temperature(76) == pytest.approx(1 / math.log(76))
    assert default_regularization(64) == pytest.approx(1 / (64 * math.log(64)))


def test_exact_mode_is_limited_to_small_images():
    with pytest.raises(SpecError):
        exact_cl_batch(build_spec(16, 4, global_size=8, local_size=3), 0.5, 4)


# ---------------------------------------------------------------------------
# gradient
# ---------------------------------------------------------------------------


def test_finite_differences_with_frozen_pool_side(tiny):
    rng = np.random.default_rng(8)
    Q0 = rng.normal(0, 0.3, (tiny.dim, tiny.dim))
    tau, lam = 0.5, 0.02
    batch = exact_cl_batch(tiny, 0.5, 8)
    analytic = cl_gradient(tiny, Q0, tau, lam, batch, "exact").full
    numeric = -fd_gradient(direct_cl_loss(tiny, 0.5, 8, tau, lam, Q0), Q0, 1e-5)
    assert relative_error(analytic, numeric) <= 1e-4


def test_per_patch_integrand_matches_the_full_gradient(tiny):
    rng = np.random.default_rng(9)
    g = cl_gradient(tiny, rng.normal(0, 0.5, (tiny.dim, tiny.dim)), 0.4, 0.0, exact_cl_batch(tiny, 0.5, 8), "exact")
    assert g.lemma_deviation <= 1e-9


def test_global_direction_dominates_at_zero_without_noise():
    spec = build_spec(64, 8, 0.9, 0.35, seed=0)
    rng = np.random.default_rng(0)
    zero = np.zeros((spec.dim, spec.dim))
    tau = default_temperature(spec.dim)
    parts = [cl_gradient(spec, zero, tau, 0.0, draw_cl_batch(spec, 256, 0.5, 0.0, 32, rng)).alpha for _ in range(8)]
    alpha = np.mean(parts, axis=0)
    assert np.all(alpha[:, :, 0] > 0)
    ratio = alpha[:, :, 0] / np.abs(alpha[:, :, 1:]).max(axis=2)
    exponent = min(1 - spec.kappa_s, 2 * (spec.kappa_c - spec.kappa_s))
    assert ratio.min() >= spec.num_patches**exponent / 4


def test_heavy_weight_decay_shrinks_the_matrix(mc_batch):
    spec, batch = mc_batch
    rng = np.random.default_rng(10)
    Q = rng.normal(0, 0.5, (spec.dim, spec.dim))
    unreg = cl_gradient(spec, Q, 0.3, 0.0, batch).unregularized
    lam = 2 * np.linalg.norm(unreg) / np.linalg.norm(Q)
    g = cl_gradient(spec, Q, 0.3, lam, batch)
    new = cl_step(AttentionWeights(Q.copy(), spec), 0.1 / lam, g)
    assert np.linalg.norm(new.Q) < np.linalg.norm(Q)


def test_only_position_rows_move(mc_batch):
    spec, batch = mc_batch
    rng = np.random.default_rng(11)
    g = cl_gradient(spec, rng.normal(size=(spec.dim, spec.dim)), 0.3, 0.0, batch)
    assert not g.unregularized[: spec.num_features].any()


# ---------------------------------------------------------------------------
# steps and training
# ---------------------------------------------------------------------------


def test_first_step_from_zero_is_the_scaled_gradient(mc_batch):
    spec, batch = mc_batch
    g = cl_gradient(spec, np.zeros((spec.dim, spec.dim)), 0.3, 0.01, batch)
    new = cl_step(AttentionWeights.zeros(spec), 5.0, g)
    assert np.array_equal(extract_correlations(new.Q, spec).fp, 5.0 * g.alpha)


def test_zero_step_size_is_the_identity(mc_batch):
    spec, batch = mc_batch
    rng = np.random.default_rng(12)
    w = AttentionWeights(rng.normal(size=(spec.dim, spec.dim)), spec)
    assert np.array_equal(cl_step(w, 0.0, cl_gradient(spec, w.Q, 0.3, 0.01, batch)).Q, w.Q)


def test_negative_step_and_blow_up_are_rejected(mc_batch):
    spec, batch = mc_batch
    g = cl_gradient(spec, np.zeros((spec.dim, spec.dim)), 0.3, 0.0, batch)
    with pytest.raises(ValueError):
        cl_step(AttentionWeights.zeros(spec), -1.0, g)
    with pytest.raises(DivergenceError):
        cl_step(AttentionWeights.zeros(spec), 1e12, g)


@pytest.mark.parametrize("resample", [False, True])
def test_seeded_training_is_reproducible(resample):
    spec = build_spec(16, 4, global_size=8, local_size=3, seed=1)

    def run(seed):
        tr = ClTrainer(spec, 20.0, batch_size=32, num_negatives=8, resample=resample, seed=seed)
        return tr, [tr.step().loss.total for _ in range(5)]

    a, la = run(3)
    b, lb = run(3)
    assert np.array_equal(a.weights.Q, b.weights.Q) and la == lb
    c, _ = run(4)
    assert not np.array_equal(a.weights.Q, c.weights.Q)


def test_frozen_pool_descent_lowers_the_objective():
    spec = build_spec(16, 4, global_size=8, local_size=3, seed=1)
    tr = ClTrainer(spec, 20.0, batch_size=64, num_negatives=8, seed=0)
    losses = [tr.step().loss.total for _ in range(20)]
    assert losses[-1] < losses[0]


def test_exact_trainer_runs_on_the_enumerated_batch(tiny):
    tr = ClTrainer(tiny, 5.0, mode="exact", num_negatives=8, noise=0.0)
    first = tr.step()
    second = tr.step()
    assert second.loss.total <= first.loss.total
    with pytest.raises(ValueError):
        ClTrainer(tiny, 1.0, mode="bogus")
