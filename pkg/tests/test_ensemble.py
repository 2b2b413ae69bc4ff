import numpy as np
import pytest

from spalab.ensemble import DESK_ITERS, FULL_ITERS, STAGES, run_stage, saa
from spalab.structured import GroupSpec

ITERS = (30, 30, 60)


@pytest.fixture(scope="module")
def cascade(small_task):
    model, _, test = small_task
    return saa(model, test.images, test.labels, 1, per_stage_iters=ITERS, seed=2)


def test_stage_order_and_defaults():
    assert STAGES == ("spgd_unproj", "spgd_proj", "rs")
    assert DESK_ITERS == (1000, 1000, 2000) and FULL_ITERS == (10000,) * 3


def test_later_stages_skip_broken_instances(cascade):
    for i, s in enumerate(cascade.broken_by):
        if s >= 0:
            assert np.all(cascade.stage_iterations[i, s + 1 :] == 0)
        if s == -2:
            assert np.all(cascade.stage_iterations[i] == 0)


def test_cascade_union_and_min_bound(small_task, cascade):
    model, _, test = small_task
    x, y = test.images, test.labels
    union, accs = set(), []
    for name, it in zip(STAGES, ITERS):
        out = run_stage(name, model, x, y, 1, it, seed=2)
        union |= set(np.flatnonzero(out.success).tolist())
        accs.append(out.robust_accuracy)
    assert cascade.broken_set() == union
    assert cascade.robust_accuracy <= min(accs)


def test_cascade_delta_breaks_instance(small_task, cascade):
    model, _, test = small_task
    from spalab.models import predict_labels
    hit = cascade.broken_by >= 0
    assert np.all(predict_labels(model, test.images[hit] + cascade.delta[hit]) != test.labels[hit])
    assert np.all(cascade.delta[~hit] == 0)


def test_cascade_deterministic(small_task, cascade):
    model, _, test = small_task
    again = saa(model, test.images, test.labels, 1, per_stage_iters=ITERS, seed=2)
    assert np.array_equal(again.broken_by, cascade.broken_by) and np.array_equal(again.delta, cascade.delta)


def test_structured_and_watermark_budgets(small_task):
    model, _, test = small_task
    x, y = test.images[:20], test.labels[:20]
    rep = saa(model, x, y, 1, spec=GroupSpec.patch(2, 8, 8), per_stage_iters=(20, 20, 40))
    for d in rep.delta:
        assert np.count_nonzero(np.any(d != 0, axis=-1)) <= 4
    rep = saa(model, x, y, 3, eps_inf=0.2, per_stage_iters=(20, 20, 40))
    assert np.all(np.abs(rep.delta) <= 0.2 + 1e-15)


def test_empty_batch(small_task):
    model, _, _ = small_task
    rep = saa(model, np.zeros((0, 8, 8, 3)), np.zeros(0, int), 1, per_stage_iters=ITERS)
    assert rep.robust_accuracy == 0.0 and rep.broken_set() == set()
