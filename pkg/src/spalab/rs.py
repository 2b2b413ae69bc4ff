"""Query-only random-search sparse attack.

Only logits are requested from the model, never gradients.  Perturbed pixels
take values at the corners of the colour cube (clipped to the budget box);
each query proposes a swap of some perturbed locations and is accepted only
if the cross-entropy of the true class strictly increases.
"""

from __future__ import annotations

import math

import numpy as np

from . import spgd
from .spgd import AttackOutcome, FeasibilityError, magnitude_box, pixel_l0
from .structured import GroupSpec, approx_group_l0

__all__ = ["rs_schedule", "rs_attack", "RS_MILESTONES"]

RS_STREAM = 0x5253
RS_MILESTONES = (0.10, 0.25, 0.50, 0.75)


def rs_schedule(it: int, total: int, alpha_init: float = 0.8, milestones=RS_MILESTONES) -> float:
    """Fraction of elements to resample at query ``it`` of ``total``.

    Starts at ``alpha_init`` and halves at each progress milestone.
    """
    if not 0 <= it < total:
        raise ValueError(f"iteration {it} outside [0, {total})")
    frac = float(alpha_init)
    progress = it / total
    for ms in milestones:
        if progress >= ms:
            frac /= 2.0
    return frac


def n_resample(frac: float, count: int) -> int:
    """``ceil(frac * count)``, at least one and at most ``count``."""
    return max(1, min(count, math.ceil(frac * count - 1e-12)))


def _logits_fn(model):
    return getattr(model, "logits", model)


def _ce(logits, y):
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return lse - z[np.arange(len(y)), y]


class _PixelState:
    """``eps`` perturbed pixel positions, each with a corner colour."""

    def __init__(self, rng, h, w, c, eps):
        self.h, self.w, self.c = h, w, c
        self.eps = min(eps, h * w)
        self.pos = rng.choice(h * w, size=self.eps, replace=False)
        self.col = rng.integers(0, 2, size=(self.eps, c)).astype(np.float64)

    def propose(self, rng, frac, it):
        new = _PixelState.__new__(_PixelState)
        new.h, new.w, new.c, new.eps = self.h, self.w, self.c, self.eps
        new.pos, new.col = self.pos.copy(), self.col.copy()
        if self.eps == 0:
            return new
        free = self.h * self.w - self.eps
        k = n_resample(frac, self.eps)
        if free > 0:
            k = min(k, free)
            slots = rng.choice(self.eps, size=k, replace=False)
            outside = np.setdiff1d(np.arange(self.h * self.w), self.pos, assume_unique=True)
            new.pos[slots] = rng.choice(outside, size=k, replace=False)
        else:
            slots = rng.choice(self.eps, size=k, replace=False)
        new.col[slots] = rng.integers(0, 2, size=(k, self.c))
        return new

    def target(self):
        """Corner image and pixel mask, ``[h, w, c]`` and ``[h, w, 1]``."""
        img = np.zeros((self.h * self.w, self.c))
        mask = np.zeros((self.h * self.w, 1))
        img[self.pos] = self.col
        mask[self.pos] = 1.0
        return img.reshape(self.h, self.w, self.c), mask.reshape(self.h, self.w, 1)

    def selection(self):
        return None


class _GroupState:
    """``eps`` group positions plus a corner colour for every pixel."""

    def __init__(self, rng, spec: GroupSpec, c, eps):
        self.spec, self.c = spec, c
        a, b = spec.grid_shape
        self.eps = min(eps, a * b)
        self.pos = rng.choice(a * b, size=self.eps, replace=False)
        h, w = spec.image_hw
        self.col = rng.integers(0, 2, size=(h, w, c)).astype(np.float64)

    def _mask(self):
        a, b = self.spec.grid_shape
        v = np.zeros(a * b)
        v[self.pos] = 1.0
        v = v.reshape(a, b)
        return v, self.spec.expand(v)[..., None]

    def propose(self, rng, frac, it):
        new = _GroupState.__new__(_GroupState)
        new.spec, new.c, new.eps = self.spec, self.c, self.eps
        new.pos, new.col = self.pos.copy(), self.col.copy()
        if self.eps == 0:
            return new
        a, b = self.spec.grid_shape
        free = a * b - self.eps
        if it % 2 == 0 and free > 0:
            k = min(n_resample(frac, self.eps), free)
            slots = rng.choice(self.eps, size=k, replace=False)
            outside = np.setdiff1d(np.arange(a * b), self.pos, assume_unique=True)
            new.pos[slots] = rng.choice(outside, size=k, replace=False)
        else:
            _, m = self._mask()
            pix = np.flatnonzero(m[..., 0].reshape(-1))
            k = n_resample(frac, pix.size)
            pick = rng.choice(pix, size=k, replace=False)
            flat = new.col.reshape(-1, self.c)
            flat[pick] = rng.integers(0, 2, size=(k, self.c))
        return new

    def target(self):
        _, m = self._mask()
        return self.col, m

    def selection(self):
        return self._mask()[0]


def _materialize(state, x, lo, hi):
    corner, mask = state.target()
    return np.clip(corner - x, lo, hi) * mask


def _assert_proposals(x, cand, props, eps, eps_inf, q):
    where = f"query {q + 1}"
    xa = x + cand
    if np.any(xa < 0.0) or np.any(xa > 1.0):
        raise FeasibilityError(f"{where}: box constraint violated")
    if np.any(np.abs(cand) > eps_inf):
        raise FeasibilityError(f"{where}: magnitude exceeds eps_inf")
    for s, d in zip(props, cand):
        sel = s.selection()
        used = int(np.count_nonzero(sel)) if sel is not None else int(pixel_l0(d[None])[0])
        if used > eps:
            raise FeasibilityError(f"{where}: proposal uses {used} > {eps}")
        if sel is not None and np.any(np.any(d != 0, axis=-1) & ~(s.spec.expand(sel) > 0)):
            raise FeasibilityError(f"{where}: perturbation outside the selected groups")


def rs_attack(model, x, y, eps: int, max_queries: int = 1000, seed: int = 0, spec: GroupSpec | None = None,
              eps_inf: float = 1.0, alpha_init: float = 0.8, indices=None, chunk: int = 256) -> AttackOutcome:
    """Random-search attack with pixel budget ``eps`` (or ``eps`` groups of ``spec``).

    ``model`` needs only a ``logits(x)`` method (or is itself such a
    callable).  ``iterations`` in the outcome counts model queries, one per
    proposal including the initial draw; instances already misclassified
    succeed at query 0.
    """
    logits_of = _logits_fn(model)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    n, h, w, c = x.shape
    indices = np.arange(n) if indices is None else np.asarray(indices)
    lo, hi = magnitude_box(x, eps_inf)

    def query(xs):
        return np.concatenate([logits_of(xs[i : i + chunk]) for i in range(0, len(xs), chunk)])

    clean_logits = query(x) if n else np.zeros((0, 1))
    clean_wrong = np.argmax(clean_logits, axis=1) != y if n else np.zeros(0, bool)
    success = clean_wrong.copy()
    queries = np.zeros(n, dtype=np.int64)
    delta = np.zeros_like(x)
    best_loss = np.full(n, -np.inf)
    rngs = [np.random.default_rng([int(seed), int(i), RS_STREAM]) for i in indices]
    states: list = [None] * n
    active = ~clean_wrong
    history = {int(i): [] for i in np.flatnonzero(active)}

    for q in range(max_queries):
        act = np.flatnonzero(active)
        if act.size == 0:
            break
        frac = rs_schedule(q, max_queries, alpha_init)
        props, cand = [], np.empty((act.size,) + x.shape[1:])
        for j, i in enumerate(act):
            if states[i] is None:
                s = _GroupState(rngs[i], spec, c, eps) if spec is not None else _PixelState(rngs[i], h, w, c, eps)
            else:
                s = states[i].propose(rngs[i], frac, q)
            props.append(s)
            cand[j] = _materialize(s, x[i], lo[i], hi[i])
        if spgd.CHECK_INVARIANTS:
            _assert_proposals(x[act], cand, props, eps, eps_inf, q)
        logits = query(x[act] + cand)
        loss = _ce(logits, y[act])
        fooled = np.argmax(logits, axis=1) != y[act]
        for j, i in enumerate(act):
            queries[i] = q + 1
            if fooled[j] or loss[j] > best_loss[i]:
                states[i], delta[i] = props[j], cand[j]
                best_loss[i] = max(best_loss[i], loss[j])
            history[int(i)].append(best_loss[i])
            if fooled[j]:
                success[i] = True
                active[i] = False

    mask = np.any(delta != 0, axis=-1, keepdims=True).astype(np.float64)
    group_mask, group_l0 = None, np.full(n, -1, dtype=np.int64)
    if spec is not None:
        a, b = spec.grid_shape
        group_mask = np.zeros((n, a, b))
        for i in range(n):
            if states[i] is not None:
                group_mask[i] = states[i].selection()
                group_l0[i] = approx_group_l0(delta[i], group_mask[i], spec)
            else:
                group_l0[i] = 0
    return AttackOutcome(
        success=success,
        iterations=queries,
        delta=delta,
        l0=pixel_l0(delta),
        group_l0=group_l0,
        clean_wrong=clean_wrong,
        mask=mask,
        group_mask=group_mask,
        meta={"attack": "rs", "best_loss_history": history},
    )
