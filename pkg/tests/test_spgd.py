import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import expit

from spalab import spgd
from spalab.spgd import (FeasibilityError, SpgdConfig, magnitude_gradient, mask_gradient, pixel_l0, project_mask,
                         spgd_attack, update_continuous_mask, update_magnitude)


# -- magnitude step ---------------------------------------------------------

def test_magnitude_clipped_to_box():
    assert update_magnitude(np.array([0.3]), np.array([1.0]), 0.25, np.array([0.5]))[0] == 0.5


def test_magnitude_zero_gradient_is_no_move():
    p = np.array([0.1, -0.2])
    out = update_magnitude(p, np.array([0.0, 0.0]), 0.25, np.array([0.5, 0.5]))
    assert np.array_equal(out, p)


def test_watermark_bound():
    out = update_magnitude(np.array([0.2]), np.array([1.0]), 0.25, np.array([0.5]), eps_inf=0.25)
    assert out[0] == 0.25


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 12, elements=st.floats(0, 1)), arrays(np.float64, 12, elements=st.floats(-1, 1)),
       arrays(np.float64, 12, elements=st.floats(-5, 5)), st.floats(0.05, 1.0))
def test_magnitude_step_stays_feasible(x, p, g, eps_inf):
    out = update_magnitude(np.clip(p, -x, 1 - x), g, 0.25, x, eps_inf)
    assert np.all(x + out >= 0) and np.all(x + out <= 1) and np.all(np.abs(out) <= eps_inf)


# -- mask projection --------------------------------------------------------

def test_project_top_two():
    m = project_mask(np.array([2.0, 0.5, -1.0, 0.1]).reshape(2, 2, 1), 2)
    assert np.flatnonzero(m).tolist() == [0, 1]


def test_project_tie_breaks_to_lowest_index():
    m = project_mask(np.array([1.0, 1.0, 0.0, 0.0]).reshape(2, 2, 1), 1)
    assert np.flatnonzero(m).tolist() == [0]


def test_project_ranks_saturated_values():
    # sigmoid(40) == sigmoid(50) == 1.0 in float64; the larger logit still wins
    m = project_mask(np.array([40.0, 50.0, 0.0]), 1)
    assert np.flatnonzero(m).tolist() == [1]


def test_project_budget_larger_than_image():
    assert project_mask(np.zeros((2, 2, 1)), 9).sum() == 4


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 9, elements=st.floats(-6, 6)), st.integers(0, 9))
def test_project_same_under_sigmoid_and_optimal(mt, eps):
    m = project_mask(mt, eps)
    assert m.sum() == min(eps, 9)
    s = expit(mt)
    ranked_by_sigmoid = np.zeros(9)
    ranked_by_sigmoid[np.argsort(-s, kind="stable")[:eps]] = 1.0
    # same objective value (identical masks unless sigmoid saturates into ties)
    assert abs(np.sum(s * m) - np.sum(s * ranked_by_sigmoid)) < 1e-12
    best = max(np.sum(s[list(c)]) for c in itertools.combinations(range(9), min(eps, 9)))
    assert np.sum(s * m) >= best - 1e-12


def test_project_batched_rows_independent(rng):
    mt = rng.normal(size=(5, 4, 4, 1))
    batched = project_mask(mt, 3, batch_dims=1)
    for i in range(5):
        assert np.array_equal(batched[i], project_mask(mt[i], 3))


# -- continuous mask step ---------------------------------------------------

def test_mask_step_skipped_below_gamma():
    mt = np.array([0.3, -0.2])
    g = np.array([1e-9, 0.0])
    assert np.array_equal(update_continuous_mask(mt, g, 1.0), mt)


def test_mask_step_normalized():
    out = update_continuous_mask(np.zeros(2), np.array([3.0, 4.0]), 1.0)
    np.testing.assert_allclose(out, [0.6, 0.8], atol=1e-15)


def test_mask_step_beta_zero():
    mt = np.array([0.5, 0.1])
    assert np.array_equal(update_continuous_mask(mt, np.array([1.0, 2.0]), 0.0), mt)


def test_mask_step_batched_norm_per_row():
    g = np.array([[3.0, 4.0], [1e-10, 0.0]])
    out = update_continuous_mask(np.zeros((2, 2)), g, 1.0, batch_dims=1)
    np.testing.assert_allclose(out, [[0.6, 0.8], [0.0, 0.0]])


# -- gradients --------------------------------------------------------------

def test_mask_gradient_zero_magnitude(rng):
    g = rng.normal(size=(3, 3, 3))
    assert np.all(mask_gradient(g, np.zeros((3, 3, 3)), rng.normal(size=(3, 3, 1))) == 0)


def test_mask_gradient_quarter_at_zero(rng):
    g = rng.normal(size=(2, 2, 3))
    p = rng.normal(size=(2, 2, 3))
    out = mask_gradient(g, p, np.zeros((2, 2, 1)))
    np.testing.assert_allclose(out, 0.25 * np.sum(g * p, axis=-1, keepdims=True), atol=1e-15)


def test_mask_gradient_direct_formula(rng):
    g = rng.normal(size=(4, 5, 3))
    p = rng.normal(size=(4, 5, 3))
    mt = rng.normal(size=(4, 5, 1)) * 3
    sig = 1 / (1 + np.exp(-mt))
    direct = np.sum(g * p * sig * (1 - sig), axis=-1, keepdims=True)
    np.testing.assert_allclose(mask_gradient(g, p, mt), direct, atol=1e-12)


def test_projected_gradient_support(rng):
    g = rng.normal(size=(6, 6, 3))
    m = project_mask(rng.normal(size=(6, 6, 1)), 4)
    out = magnitude_gradient(g, m, rng.normal(size=(6, 6, 1)), "projected")
    assert np.count_nonzero(np.any(out != 0, axis=-1)) <= 4


def test_unprojected_gradient_limits(rng):
    g = rng.normal(size=(3, 3, 2))
    m = np.zeros((3, 3, 1))
    np.testing.assert_allclose(magnitude_gradient(g, m, np.zeros((3, 3, 1)), "unprojected"), 0.5 * g)
    np.testing.assert_allclose(magnitude_gradient(g, m, np.full((3, 3, 1), 80.0), "unprojected"), g)
    with pytest.raises(ValueError):
        magnitude_gradient(g, m, m, "sideways")


def test_pixel_l0_counts_any_channel():
    d = np.zeros((1, 3, 3, 3))
    d[0, 0, 0, 2] = 0.1
    d[0, 1, 1, :] = -0.2
    assert pixel_l0(d).tolist() == [2]


# -- config -----------------------------------------------------------------

def test_default_steps():
    a, b, t = SpgdConfig(eps=5, eps_inf=0.5).resolved(16, 16)
    assert (a, b, t) == (0.125, 4.0, 3)
    a, b, t = SpgdConfig(eps=5).resolved(16, 16, structured=True)
    assert (a, b, t) == (0.0125, 0.2, 50)


@pytest.mark.parametrize("kw", [dict(eps=-1), dict(eps=1, eps_inf=0.0), dict(eps=1, eps_inf=1.5),
                                dict(eps=1, backward="both"), dict(eps=1, tolerance=0), dict(eps=1, alpha=-1)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SpgdConfig(**kw)


# -- attack -----------------------------------------------------------------

def test_misclassified_input_is_vacuous_success(small_task):
    model, _, test = small_task
    from spalab.models import predict_labels
    x = test.images[:10]
    wrong = (predict_labels(model, x) + 1) % 4
    out = spgd_attack(model, x, wrong, SpgdConfig(eps=3, iters=20))
    assert out.success.all() and out.clean_wrong.all()
    assert np.all(out.iterations == 0) and np.all(out.delta == 0)


@pytest.mark.parametrize("mode", ["projected", "unprojected"])
def test_attack_breaks_small_model(small_task, mode):
    model, _, test = small_task
    out = spgd_attack(model, test.images, test.labels, SpgdConfig(eps=4, iters=100, backward=mode))
    assert out.success.mean() > 0.9
    from spalab.models import predict_labels
    adv = predict_labels(model, test.images + out.delta)
    assert np.all(adv[out.success & ~out.clean_wrong] != test.labels[out.success & ~out.clean_wrong])


def test_returned_perturbations_feasible_on_1000_instances(small_task):
    model, train, _ = small_task
    x, y = train.images[:300], train.labels[:300]
    r = np.random.default_rng(5)
    xs = np.concatenate([x, r.random((700, 8, 8, 3))])
    ys = np.concatenate([y, r.integers(0, 4, 700)])
    for eps, eps_inf in [(2, 1.0), (5, 0.3)]:
        out = spgd_attack(model, xs, ys, SpgdConfig(eps=eps, eps_inf=eps_inf, iters=15))
        assert np.all(out.l0 <= eps)
        assert np.all(xs + out.delta >= 0) and np.all(xs + out.delta <= 1)
        assert np.all(np.abs(out.delta) <= eps_inf)


def test_invariant_checker_is_active():
    assert spgd.CHECK_INVARIANTS
    with pytest.raises(FeasibilityError):
        spgd._assert_feasible(np.full((1, 2, 2, 1), 0.9), np.full((1, 2, 2, 1), 0.5), np.ones((1, 2, 2, 1)),
                              np.ones((1, 2, 2, 1)), 4, 1.0, "probe")


def test_reinit_every_t_iterations_with_zero_gradient(zero_model):
    x = np.random.default_rng(0).random((2, 8, 8, 3))
    y = np.zeros(2, dtype=int)  # constant logits predict class 0: never fooled
    for t in (1, 3, 5):
        changes, last = [], {}

        def cb(it, st):
            mt = st["mtilde"].copy()
            if "mt" in last and not np.array_equal(mt, last["mt"]):
                changes.append(it)
            last["mt"] = mt

        out = spgd_attack(zero_model, x, y, SpgdConfig(eps=3, iters=31, tolerance=t), callback=cb)
        expected = list(range(t, 31, t))
        assert changes == expected
        assert out.reinits.tolist() == [len(expected)] * 2
        assert not out.success.any() and np.all(out.iterations == 31)


def test_seeded_determinism(small_task):
    model, _, test = small_task
    cfg = SpgdConfig(eps=2, iters=40, seed=3)
    a = spgd_attack(model, test.images, test.labels, cfg)
    b = spgd_attack(model, test.images, test.labels, cfg)
    assert np.array_equal(a.delta, b.delta) and np.array_equal(a.iterations, b.iterations)
    c = spgd_attack(model, test.images, test.labels, SpgdConfig(eps=2, iters=40, seed=4))
    assert not np.array_equal(a.delta, c.delta)


def test_instance_result_independent_of_batch(small_task):
    model, _, test = small_task
    cfg = SpgdConfig(eps=2, iters=40, seed=1)
    full = spgd_attack(model, test.images, test.labels, cfg)
    idx = np.array([4, 17, 33])
    part = spgd_attack(model, test.images[idx], test.labels[idx], cfg, indices=idx)
    assert np.array_equal(full.delta[idx], part.delta)
    assert np.array_equal(full.iterations[idx], part.iterations)


def test_zero_iterations_only_checks_start(small_task):
    model, _, test = small_task
    out = spgd_attack(model, test.images, test.labels, SpgdConfig(eps=2, iters=0))
    assert np.all(out.iterations == 0)
