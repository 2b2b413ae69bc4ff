"""Sparse-PGD for pixel-l0 bounded perturbations.

The perturbation is ``delta = p * m``: a dense magnitude ``p`` kept inside the
image box, times a binary pixel mask ``m`` obtained by keeping the ``eps``
largest entries of a continuous mask.  ``p`` moves by signed gradient steps,
the continuous mask by normalized gradient ascent, and the continuous mask is
redrawn when the binary mask stalls for ``tolerance`` iterations.

All state carries a leading instance axis; instances are attacked together
but each owns its RNG stream, so an instance's trajectory does not depend on
which other instances share the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit

from .models import Model, loss_and_input_grad, predict

__all__ = [
    "SpgdConfig",
    "AttackOutcome",
    "FeasibilityError",
    "update_magnitude",
    "project_mask",
    "update_continuous_mask",
    "mask_gradient",
    "magnitude_gradient",
    "pixel_l0",
    "instance_rng",
    "spgd_attack",
]

BACKWARD_MODES = ("projected", "unprojected")

# Set by the test suite; every attack iteration then re-checks feasibility.
CHECK_INVARIANTS = False

SPGD_STREAM = 0x5047


class FeasibilityError(AssertionError):
    pass


@dataclass
class SpgdConfig:
    """Budget and step sizes for one sPGD run.

    ``alpha``, ``beta`` and ``tolerance`` left as ``None`` resolve to the
    unstructured defaults (``0.25*eps_inf``, ``0.25*sqrt(h*w)``, 3) or, for
    the structured attack, ``0.0125*eps_inf``, ``0.0125*sqrt(h*w)``, 50.
    """

    eps: int
    eps_inf: float = 1.0
    alpha: float | None = None
    beta: float | None = None
    iters: int = 300
    tolerance: int | None = None
    gamma: float = 2e-8
    backward: str = "unprojected"
    seed: int = 0

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        if not 0.0 < self.eps_inf <= 1.0:
            raise ValueError("eps_inf must lie in (0, 1]")
        if self.iters < 0:
            raise ValueError("iters must be >= 0")
        if self.tolerance is not None and self.tolerance < 1:
            raise ValueError("tolerance must be >= 1")
        if self.backward not in BACKWARD_MODES:
            raise ValueError(f"backward must be one of {BACKWARD_MODES}")
        for name in ("alpha", "beta"):
            val = getattr(self, name)
            if val is not None and val < 0:
                raise ValueError(f"{name} must be non-negative")

    def resolved(self, h: int, w: int, structured: bool = False):
        scale = 0.0125 if structured else 0.25
        alpha = scale * self.eps_inf if self.alpha is None else self.alpha
        beta = scale * np.sqrt(h * w) if self.beta is None else self.beta
        tol = (50 if structured else 3) if self.tolerance is None else self.tolerance
        return float(alpha), float(beta), int(tol)


@dataclass
class AttackOutcome:
    """Per-instance results of an attack on a batch.

    ``iterations`` counts gradient iterations for sPGD and model queries for
    the black-box attack.  ``group_l0`` is the approximate group norm of the
    returned perturbation under its selection ``v`` (-1 for pixel attacks).
    """

    success: np.ndarray
    iterations: np.ndarray
    delta: np.ndarray
    l0: np.ndarray
    group_l0: np.ndarray
    clean_wrong: np.ndarray
    mask: np.ndarray
    group_mask: np.ndarray | None = None
    reinits: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def robust_accuracy(self) -> float:
        return float(1.0 - self.success.mean()) if len(self.success) else 0.0


def instance_rng(seed: int, index: int, stream: int = SPGD_STREAM) -> np.random.Generator:
    """Independent generator for one instance of one attack."""
    return np.random.default_rng([int(seed), int(index), int(stream)])


def pixel_l0(delta: np.ndarray) -> np.ndarray:
    """Number of pixels with any non-zero channel, per instance of ``[n, h, w, c]``."""
    return np.count_nonzero(np.any(delta != 0, axis=-1).reshape(len(delta), -1), axis=1)


# ---------------------------------------------------------------------------
# single-step operators
# ---------------------------------------------------------------------------


def magnitude_box(x: np.ndarray, eps_inf: float = 1.0):
    """Elementwise bounds on ``p`` so that ``0 <= x + p <= 1`` and ``|p| <= eps_inf``."""
    return np.maximum(-x, -eps_inf), np.minimum(1.0 - x, eps_inf)


def update_magnitude(p, grad_p, alpha, x, eps_inf=1.0):
    """Signed ascent step on ``p`` followed by the box projection."""
    lo, hi = magnitude_box(np.asarray(x, dtype=np.float64), eps_inf)
    return np.clip(p + alpha * np.sign(grad_p), lo, hi)


def project_mask(mtilde, eps: int, batch_dims: int = 0) -> np.ndarray:
    """Binary mask with ones at the ``eps`` largest entries of ``mtilde``.

    Ranking uses ``mtilde`` itself rather than ``sigmoid(mtilde)``: the order
    is the same, but the sigmoid saturates to 1.0 in float64 and would
    create artificial ties.  Ties go to the lowest linear index.
    """
    mt = np.asarray(mtilde, dtype=np.float64)
    lead = mt.shape[:batch_dims]
    flat = mt.reshape((int(np.prod(lead)), -1))
    k = min(int(eps), flat.shape[1])
    out = np.zeros_like(flat)
    if k > 0:
        top = np.argsort(-flat, axis=1, kind="stable")[:, :k]
        np.put_along_axis(out, top, 1.0, axis=1)
    return out.reshape(mt.shape)


def _row_norm(g: np.ndarray, batch_dims: int) -> np.ndarray:
    lead = g.shape[:batch_dims]
    flat = g.reshape((int(np.prod(lead)), -1))
    return np.sqrt(np.sum(flat * flat, axis=1)).reshape(lead + (1,) * (g.ndim - batch_dims))


def update_continuous_mask(mtilde, grad, beta, gamma=2e-8, batch_dims: int = 0):
    """Normalized ascent step; rows whose gradient norm is below ``gamma`` stay put."""
    norm = _row_norm(np.asarray(grad, dtype=np.float64), batch_dims)
    safe = np.where(norm >= gamma, norm, 1.0)
    step = np.where(norm >= gamma, grad / safe, 0.0)
    return mtilde + beta * step


def mask_gradient(grad_delta, p, mtilde):
    """Gradient w.r.t. the continuous mask, with the top-k projection skipped.

    ``grad_delta`` and ``p`` are ``[..., h, w, c]``; the result is
    ``[..., h, w, 1]``.  The channel sum is taken before the sigmoid
    derivative factor (same value, fewer roundings).
    """
    g_m = np.sum(grad_delta * p, axis=-1, keepdims=True)
    s = expit(mtilde)
    return g_m * (s * (1.0 - s))


def magnitude_gradient(grad_delta, m, mtilde, mode: str):
    """``grad_delta * m`` (projected) or ``grad_delta * sigmoid(mtilde)`` (unprojected)."""
    if mode == "projected":
        return grad_delta * m
    if mode == "unprojected":
        return grad_delta * expit(mtilde)
    raise ValueError(f"unknown backward mode {mode!r}")


# ---------------------------------------------------------------------------
# shared iteration engine
# ---------------------------------------------------------------------------


class PixelLift:
    """Identity map between the selection grid and the pixel mask."""

    structured = False

    def __init__(self, h: int, w: int):
        self.grid_shape = (h, w, 1)

    def expand(self, v):
        return v

    def soft_expand(self, s):
        return s

    def pull(self, g_m):
        return g_m

    def group_norm(self, delta, v):
        return np.full(len(delta), -1, dtype=np.int64)


def _chunked_grad(model, xs, ys, chunk=256):
    logits, grads = [], []
    for i in range(0, len(xs), chunk):
        lo, g = loss_and_input_grad(model, xs[i : i + chunk], ys[i : i + chunk])
        logits.append(lo)
        grads.append(g)
    return np.concatenate(logits), np.concatenate(grads)


def clean_predictions(model, x, chunk=256):
    return np.concatenate([np.argmax(predict(model, x[i : i + chunk]), axis=1) for i in range(0, len(x), chunk)])


def _assert_feasible(x, p, m, v, eps, eps_inf, where):
    d = p * m
    if not np.all(np.isin(m, (0.0, 1.0))):
        raise FeasibilityError(f"{where}: mask not binary")
    nv = np.count_nonzero(v.reshape(len(v), -1), axis=1)
    if np.any(nv > eps):
        raise FeasibilityError(f"{where}: selection exceeds budget {eps}: {nv.max()}")
    xa = x + d
    if np.any(xa < 0.0) or np.any(xa > 1.0):
        raise FeasibilityError(f"{where}: box constraint violated")
    if np.any(np.abs(p) > eps_inf):
        raise FeasibilityError(f"{where}: magnitude exceeds eps_inf")


def run_sparse_pgd(model: Model, x, y, cfg: SpgdConfig, lift, indices=None,
                   callback: Callable[[int, dict], None] | None = None) -> AttackOutcome:
    """Iterate the sPGD updates for every instance of ``x`` under ``lift``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    n, h, w, c = x.shape
    indices = np.arange(n) if indices is None else np.asarray(indices)
    alpha, beta, tol = cfg.resolved(h, w, lift.structured)
    eps, eps_inf = int(cfg.eps), float(cfg.eps_inf)
    grid = lift.grid_shape
    lo, hi = magnitude_box(x, eps_inf)

    clean_wrong = clean_predictions(model, x) != y if n else np.zeros(0, bool)
    success = clean_wrong.copy()
    iterations = np.zeros(n, dtype=np.int64)
    reinits = np.zeros(n, dtype=np.int64)
    counter = np.zeros(n, dtype=np.int64)

    p = np.zeros_like(x)
    mt = np.zeros((n,) + grid)
    rngs = [instance_rng(cfg.seed, idx) for idx in indices]
    for i in np.flatnonzero(~clean_wrong):
        p[i] = rngs[i].uniform(-eps_inf, eps_inf, size=(h, w, c))
        mt[i] = rngs[i].uniform(-1.0, 1.0, size=grid)
    p = np.clip(p, lo, hi)
    v = project_mask(mt, eps, batch_dims=1)
    v[clean_wrong] = 0.0
    m = lift.expand(v)

    active = ~clean_wrong
    for it in range(cfg.iters + 1):
        act = np.flatnonzero(active)
        if act.size == 0:
            break
        logits, gd = _chunked_grad(model, x[act] + p[act] * m[act], y[act])
        fooled = np.argmax(logits, axis=1) != y[act]
        if fooled.any():
            hit = act[fooled]
            success[hit] = True
            iterations[hit] = it
            active[hit] = False
        if it == cfg.iters:
            iterations[act[~fooled]] = cfg.iters
            break
        keep = ~fooled
        act, gd = act[keep], gd[keep]
        if act.size == 0:
            break

        stale = counter[act] >= tol
        if stale.any():
            redo = act[stale]
            for i in redo:
                mt[i] = rngs[i].uniform(-1.0, 1.0, size=grid)
            v[redo] = project_mask(mt[redo], eps, batch_dims=1)
            m[redo] = lift.expand(v[redo])
            counter[redo] = 0
            reinits[redo] += 1
            lg, g2 = _chunked_grad(model, x[redo] + p[redo] * m[redo], y[redo])
            gd[stale] = g2
            f2 = np.argmax(lg, axis=1) != y[redo]
            if f2.any():
                hit = redo[f2]
                success[hit] = True
                iterations[hit] = it
                active[hit] = False
                gd = gd[~np.isin(act, hit)]
                act = act[~np.isin(act, hit)]
                if act.size == 0:
                    break

        pa, mta, ma = p[act], mt[act], m[act]
        g_m = np.sum(gd * pa, axis=-1, keepdims=True)
        s = expit(mta)
        g_grid = lift.pull(g_m) * (s * (1.0 - s))
        if cfg.backward == "projected":
            g_p = gd * ma
        else:
            g_p = gd * lift.soft_expand(s)
        p[act] = np.clip(pa + alpha * np.sign(g_p), lo[act], hi[act])
        mt[act] = update_continuous_mask(mta, g_grid, beta, cfg.gamma, batch_dims=1)
        v_new = project_mask(mt[act], eps, batch_dims=1)
        same = np.all((v_new == v[act]).reshape(len(act), -1), axis=1)
        counter[act] = np.where(same, counter[act] + 1, 0)
        v[act] = v_new
        m[act] = lift.expand(v_new)

        if CHECK_INVARIANTS:
            _assert_feasible(x[act], p[act], m[act], v[act], eps, eps_inf, f"iteration {it}")
        if callback is not None:
            callback(it, {"active": act, "p": p, "mtilde": mt, "v": v, "m": m})

    delta = p * m
    delta[clean_wrong] = 0.0
    if CHECK_INVARIANTS:
        _assert_feasible(x, p * (~clean_wrong)[:, None, None, None], m, v, eps, eps_inf, "final")
    return AttackOutcome(
        success=success,
        iterations=iterations,
        delta=delta,
        l0=pixel_l0(delta),
        group_l0=lift.group_norm(delta, v),
        clean_wrong=clean_wrong,
        mask=m,
        group_mask=v if lift.structured else None,
        reinits=reinits,
        meta={"attack": f"spgd_{cfg.backward}", "alpha": alpha, "beta": beta, "tolerance": tol},
    )


def spgd_attack(model: Model, x, y, cfg: SpgdConfig, indices=None, callback=None) -> AttackOutcome:
    """Untargeted sPGD against pixel-l0 budget ``cfg.eps``.

    ``x`` is ``[n, h, w, c]`` in [0, 1].  ``indices`` are the global instance
    ids that seed the per-instance RNG streams (default ``0..n-1``).
    Instances misclassified before any perturbation count as successes with
    zero iterations and zero perturbation.
    """
    x = np.asarray(x, dtype=np.float64)
    return run_sparse_pgd(model, x, y, cfg, PixelLift(x.shape[1], x.shape[2]), indices, callback)
