import numpy as np
import pytest

from spalab.advtrain import AdvTrainConfig, backward_mode, sat_train, strades_train, write_metrics_csv
from spalab.models import TrainConfig, make_cnn, sgd_train
from spalab.structured import GroupSpec


@pytest.fixture(scope="module")
def data(small_task):
    _, train, test = small_task
    return train.subset(np.arange(80)), test


def base(epochs=2, seed=0):
    return TrainConfig(epochs=epochs, batch_size=20, lr=0.02, seed=seed)


def same_params(a, b):
    return all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_random_policy_is_fair_coin():
    rng = np.random.default_rng(0)
    draws = [backward_mode("random", 0, rng) for _ in range(4000)]
    assert abs(draws.count("projected") / 4000 - 0.5) < 0.03


def test_alternate_policy_switches_every_five_epochs():
    rng = np.random.default_rng(0)
    modes = [backward_mode("alternate", e, rng) for e in range(12)]
    assert modes[:5] == ["unprojected"] * 5 and modes[5:10] == ["projected"] * 5 and modes[10] == "unprojected"
    assert backward_mode("projected", 3, rng) == "projected"


def test_train_eps_and_validation():
    assert AdvTrainConfig(eps=10).train_eps == 60
    assert AdvTrainConfig(eps=10, eps_multiplier=1).train_eps == 10
    for kw in (dict(eps_multiplier=0.5), dict(attack_iters=-1), dict(backward_policy="both"), dict(method="PGD")):
        with pytest.raises(ValueError):
            AdvTrainConfig(**kw)


def test_zero_iterations_equals_clean_training(data):
    train, _ = data
    clean, _ = sgd_train(make_cnn((8, 8, 3), 4), train, base())
    adv, _ = sat_train(make_cnn((8, 8, 3), 4), train, AdvTrainConfig(train=base(), eps=3, eps_multiplier=1,
                                                                      attack_iters=0))
    assert same_params(clean, adv)


def test_zero_trades_weight_equals_clean_training(data):
    train, _ = data
    clean, _ = sgd_train(make_cnn((8, 8, 3), 4), train, base())
    tr, _ = strades_train(make_cnn((8, 8, 3), 4), train, AdvTrainConfig(train=base(), eps=3, method="sTRADES",
                                                                         trades_beta=0.0))
    assert same_params(clean, tr)


def test_sat_deterministic_and_within_budget(data):
    train, _ = data
    cfg = AdvTrainConfig(train=base(), eps=2, eps_multiplier=2, attack_iters=5)
    a, ha = sat_train(make_cnn((8, 8, 3), 4), train, cfg)
    b, hb = sat_train(make_cnn((8, 8, 3), 4), train, cfg)
    assert same_params(a, b)
    assert ha.extra["backward_modes"] == hb.extra["backward_modes"]
    assert set(ha.extra["backward_modes"]) <= {"projected", "unprojected"}
    assert len(ha.extra["batch_l0"]) == 2 * 4
    assert max(ha.extra["batch_l0"]) <= 4


def test_sat_changes_parameters_vs_clean(data):
    train, _ = data
    clean, _ = sgd_train(make_cnn((8, 8, 3), 4), train, base())
    adv, _ = sat_train(make_cnn((8, 8, 3), 4), train, AdvTrainConfig(train=base(), eps=2, attack_iters=3))
    assert not same_params(clean, adv)


def test_strades_runs_and_stays_finite(data):
    train, _ = data
    m, hist = strades_train(make_cnn((8, 8, 3), 4), train,
                            AdvTrainConfig(train=base(), eps=2, method="sTRADES", attack_iters=3))
    assert all(np.all(np.isfinite(v)) for v in m.params.values())
    assert len(hist.train_loss) == 2


def test_method_mismatch(data):
    train, _ = data
    with pytest.raises(ValueError):
        sat_train(make_cnn((8, 8, 3), 4), train, AdvTrainConfig(method="sTRADES"))
    with pytest.raises(ValueError):
        strades_train(make_cnn((8, 8, 3), 4), train, AdvTrainConfig())


def test_structured_training_budget(data):
    train, _ = data
    cfg = AdvTrainConfig(train=base(epochs=1), eps=1, eps_multiplier=2, attack_iters=3,
                         spec=GroupSpec.patch(2, 8, 8))
    _, hist = sat_train(make_cnn((8, 8, 3), 4), train, cfg)
    assert max(hist.extra["batch_l0"]) <= 2


def test_probe_and_metrics_csv(tmp_path, data):
    train, test = data
    _, hist = sat_train(make_cnn((8, 8, 3), 4), train, AdvTrainConfig(train=base(), eps=1, attack_iters=2),
                        probe=(test.images[:10], test.labels[:10]), probe_iters=5)
    assert len(hist.extra["robust_acc_probe"]) == 2
    write_metrics_csv(hist, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "#spalab-csv-v1" and lines[1] == "epoch,clean_acc,train_loss,robust_acc_probe"
    assert len(lines) == 4
