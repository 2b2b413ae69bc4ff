"""Sparse-AutoAttack: a cascade of sPGD (both backward functions) and random search."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rs import rs_attack
from .spgd import AttackOutcome, SpgdConfig, spgd_attack
from .structured import GroupSpec, spgd_structured_attack

STAGES = ("spgd_unproj", "spgd_proj", "rs")
DESK_ITERS = (1000, 1000, 2000)
FULL_ITERS = (10000, 10000, 10000)


@dataclass
class CascadeReport:
    """Outcome of the cascade on a batch.

    ``broken_by[i]`` is the index of the stage that found an adversarial
    example for instance ``i``, ``-1`` if none did, ``-2`` if the instance
    was misclassified before any attack.  ``stage_iterations[i, s]`` is zero
    for every stage that never ran on instance ``i``.
    """

    stages: tuple[str, ...]
    broken_by: np.ndarray
    stage_iterations: np.ndarray
    delta: np.ndarray
    outcomes: list[AttackOutcome]

    @property
    def robust(self) -> np.ndarray:
        return self.broken_by == -1

    @property
    def robust_accuracy(self) -> float:
        return float(self.robust.mean()) if len(self.robust) else 0.0

    @property
    def clean_accuracy(self) -> float:
        return float(np.mean(self.broken_by != -2)) if len(self.broken_by) else 0.0

    def broken_set(self) -> set[int]:
        return set(np.flatnonzero(~self.robust).tolist())


def run_stage(name: str, model, x, y, eps: int, iters: int, seed: int = 0, spec: GroupSpec | None = None,
              eps_inf: float = 1.0, indices=None) -> AttackOutcome:
    """Run one cascade member stand-alone."""
    if name == "rs":
        return rs_attack(model, x, y, eps, iters, seed=seed, spec=spec, eps_inf=eps_inf, indices=indices)
    mode = {"spgd_unproj": "unprojected", "spgd_proj": "projected"}[name]
    cfg = SpgdConfig(eps=eps, eps_inf=eps_inf, iters=iters, backward=mode, seed=seed)
    if spec is None:
        return spgd_attack(model, x, y, cfg, indices=indices)
    return spgd_structured_attack(model, x, y, spec, cfg, indices=indices)


def saa(model, x, y, eps: int, spec: GroupSpec | None = None, eps_inf: float = 1.0,
        per_stage_iters=DESK_ITERS, seed: int = 0, indices=None) -> CascadeReport:
    """Cascade the three stages; an instance broken by one stage skips the rest.

    All stages share the same budget (``eps`` pixels or groups, ``eps_inf``)
    and the same seed; ``indices`` fix the per-instance RNG streams so a
    stage sees identical randomness whether it runs inside the cascade or
    stand-alone.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n = len(x)
    indices = np.arange(n) if indices is None else np.asarray(indices)
    broken_by = np.full(n, -1, dtype=np.int64)
    stage_iters = np.zeros((n, len(STAGES)), dtype=np.int64)
    delta = np.zeros_like(x)
    outcomes = []
    remaining = np.arange(n)
    for s, (name, iters) in enumerate(zip(STAGES, per_stage_iters)):
        if remaining.size == 0:
            break
        out = run_stage(name, model, x[remaining], y[remaining], eps, iters, seed, spec, eps_inf, indices[remaining])
        outcomes.append(out)
        if s == 0:
            broken_by[remaining[out.clean_wrong]] = -2
        fresh = out.success & ~out.clean_wrong
        stage_iters[remaining, s] = np.where(out.clean_wrong, 0, out.iterations)
        broken_by[remaining[fresh]] = s
        delta[remaining[fresh]] = out.delta[fresh]
        remaining = remaining[~out.success]
    return CascadeReport(STAGES, broken_by, stage_iters, delta, outcomes)
