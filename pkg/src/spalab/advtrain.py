"""Adversarial training against sparse perturbations (sAT and sTRADES)."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import Model, TrainConfig, TrainHistory, cross_entropy, fit
from .spgd import SpgdConfig, pixel_l0, spgd_attack
from .structured import GroupSpec, spgd_structured_attack
from .tensor import Tensor

log = logging.getLogger(__name__)

POLICIES = ("projected", "unprojected", "alternate", "random")
METHODS = ("sAT", "sTRADES")
_ADV_STREAM = 0xAD7


@dataclass
class AdvTrainConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    eps: int = 10
    eps_multiplier: float = 6.0
    attack_iters: int = 20
    tolerance: int = 10
    backward_policy: str = "random"
    method: str = "sAT"
    trades_beta: float = 6.0
    eps_inf: float = 1.0
    spec: GroupSpec | None = None
    alternate_every: int = 5

    def __post_init__(self):
        if self.eps_multiplier < 1:
            raise ValueError("eps_multiplier must be >= 1")
        if self.attack_iters < 0:
            raise ValueError("attack_iters must be >= 0")
        if self.backward_policy not in POLICIES:
            raise ValueError(f"backward_policy must be one of {POLICIES}")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")

    @property
    def train_eps(self) -> int:
        return int(round(self.eps * self.eps_multiplier))


def backward_mode(policy: str, epoch: int, rng: np.random.Generator, every: int = 5) -> str:
    """Backward function for the next batch under ``policy``."""
    if policy in ("projected", "unprojected"):
        return policy
    if policy == "alternate":
        return "unprojected" if (epoch // every) % 2 == 0 else "projected"
    return "projected" if rng.random() < 0.5 else "unprojected"


class _AdversarialLoss:
    """Batch objective used by :func:`spalab.models.fit`.

    Keeps its own generator for backward-mode draws and attack seeds so the
    minibatch order matches clean training with the same seed.
    """

    def __init__(self, cfg: AdvTrainConfig):
        self.cfg = cfg
        self.rng = np.random.default_rng([cfg.train.seed, _ADV_STREAM])
        self.modes: list[str] = []
        self.batch_l0: list[int] = []

    def perturb(self, model: Model, xb, yb, epoch: int) -> np.ndarray:
        cfg = self.cfg
        mode = backward_mode(cfg.backward_policy, epoch, self.rng, cfg.alternate_every)
        seed = int(self.rng.integers(2**31))
        self.modes.append(mode)
        if cfg.attack_iters == 0:
            return np.zeros_like(xb)
        acfg = SpgdConfig(
            eps=cfg.train_eps,
            eps_inf=cfg.eps_inf,
            iters=cfg.attack_iters,
            tolerance=cfg.tolerance,
            backward=mode,
            seed=seed,
        )
        if cfg.spec is None:
            out = spgd_attack(model, xb, yb, acfg)
            worst = int(pixel_l0(out.delta).max(initial=0))
            if worst > cfg.train_eps:
                raise AssertionError(f"train-time perturbation uses {worst} > {cfg.train_eps} pixels")
        else:
            out = spgd_structured_attack(model, xb, yb, cfg.spec, acfg)
            worst = int(np.count_nonzero(out.group_mask.reshape(len(xb), -1), axis=1).max(initial=0))
            if worst > cfg.train_eps:
                raise AssertionError(f"train-time perturbation uses {worst} > {cfg.train_eps} groups")
        self.batch_l0.append(worst)
        return out.delta

    def __call__(self, model, params, xb, yb, epoch, rng):
        if params is None:
            # post-step evaluation on the clean batch
            return cross_entropy(model.forward(Tensor(xb)), yb)
        cfg = self.cfg
        if cfg.method == "sTRADES" and cfg.trades_beta == 0.0:
            self.modes.append("none")
            return cross_entropy(model.forward(Tensor(xb), params), yb)
        delta = self.perturb(model, xb, yb, epoch)
        x_adv = np.clip(xb + delta, 0.0, 1.0)
        if cfg.method == "sAT":
            return cross_entropy(model.forward(Tensor(x_adv), params), yb)
        logits_c = model.forward(Tensor(xb), params)
        logits_a = model.forward(Tensor(x_adv), params)
        lp_c = logits_c.log_softmax()
        lp_a = logits_a.log_softmax()
        kl = (lp_c.exp() * (lp_c - lp_a)).sum().scale(1.0 / len(yb))
        return cross_entropy(logits_c, yb) + kl.scale(cfg.trades_beta)


def _train(model, dataset, cfg: AdvTrainConfig, probe=None, probe_iters: int = 50):
    objective = _AdversarialLoss(cfg)
    probe_acc: list[float] = []

    def on_epoch(epoch, m, hist):
        if probe is None:
            return
        px, py = probe
        out = spgd_attack(m, px, py, SpgdConfig(eps=cfg.eps, iters=probe_iters, seed=epoch))
        probe_acc.append(out.robust_accuracy)

    trained, hist = fit(model, dataset.images, dataset.labels, cfg.train, batch_loss=objective, on_epoch=on_epoch)
    hist.extra["backward_modes"] = objective.modes
    hist.extra["batch_l0"] = objective.batch_l0
    hist.extra["robust_acc_probe"] = probe_acc
    return trained, hist


def sat_train(model: Model, dataset, cfg: AdvTrainConfig, probe=None, probe_iters: int = 50):
    """Vanilla adversarial training with sPGD as the inner maximizer."""
    if cfg.method != "sAT":
        raise ValueError("sat_train needs cfg.method == 'sAT'")
    return _train(model, dataset, cfg, probe, probe_iters)


def strades_train(model: Model, dataset, cfg: AdvTrainConfig, probe=None, probe_iters: int = 50):
    """TRADES-style training: clean cross-entropy plus weighted KL to the adversarial prediction."""
    if cfg.method != "sTRADES":
        raise ValueError("strades_train needs cfg.method == 'sTRADES'")
    return _train(model, dataset, cfg, probe, probe_iters)


def write_metrics_csv(hist: TrainHistory, path) -> None:
    probe = hist.extra.get("robust_acc_probe", [])
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        fh.write("#spalab-csv-v1\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "clean_acc", "train_loss", "robust_acc_probe"])
        for e, (acc, loss) in enumerate(zip(hist.clean_acc, hist.train_loss)):
            w.writerow([e, f"{acc:.6f}", f"{loss:.6f}", f"{probe[e]:.6f}" if e < len(probe) else ""])
