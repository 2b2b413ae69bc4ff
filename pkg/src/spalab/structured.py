"""Structured sparse perturbations: group masks, group-l0 norms, structured sPGD.

A group is a translated copy of a binary pattern kernel.  A binary selection
``v`` over the grid of kernel positions expands to the pixel mask
``min(tconv(v, k, s), 1)``; the gradient flows back through the plain
convolution with the same kernel (the clip is ignored).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import Model
from .spgd import AttackOutcome, SpgdConfig, run_sparse_pgd
from .tensor import conv_map, tconv_map

__all__ = [
    "GroupSpec",
    "GroupL0Infeasible",
    "GroupL0CapExceeded",
    "expand_group_mask",
    "group_mask_gradient",
    "exact_group_l0",
    "approx_group_l0",
    "spgd_structured_attack",
    "ratio_simulation",
    "load_pattern",
    "save_pattern",
]


class GroupL0Infeasible(ValueError):
    """A perturbed pixel lies outside every group."""


class GroupL0CapExceeded(RuntimeError):
    """The minimum cover needs more groups than the caller allowed."""


@dataclass(eq=False)
class GroupSpec:
    """Groups generated by sliding ``kernel`` over an ``h x w`` image."""

    kernel: np.ndarray
    image_hw: tuple[int, int]
    stride: int = 1
    name: str = "pattern"
    _supports: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        k = np.asarray(self.kernel, dtype=np.float64)
        if k.ndim != 2:
            raise ValueError("kernel must be 2-D")
        if not np.all(np.isin(k, (0.0, 1.0))) or not k.any():
            raise ValueError("kernel entries must be 0/1 with at least one 1")
        h, w = self.image_hw
        if k.shape[0] > h or k.shape[1] > w:
            raise ValueError(f"kernel {k.shape} does not fit a {h}x{w} image")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        self.kernel = k
        self.image_hw = (int(h), int(w))

    @classmethod
    def patch(cls, r: int, h: int, w: int, stride: int = 1) -> "GroupSpec":
        return cls(np.ones((r, r)), (h, w), stride, f"patch{r}x{r}")

    @classmethod
    def rows(cls, h: int, w: int) -> "GroupSpec":
        return cls(np.ones((1, w)), (h, w), 1, "rows")

    @classmethod
    def columns(cls, h: int, w: int) -> "GroupSpec":
        return cls(np.ones((h, 1)), (h, w), 1, "columns")

    @classmethod
    def from_pattern_file(cls, path, h: int, w: int, stride: int = 1) -> "GroupSpec":
        return cls(load_pattern(path), (h, w), stride, Path(path).stem)

    @property
    def grid_shape(self) -> tuple[int, int]:
        (h, w), (r1, r2), s = self.image_hw, self.kernel.shape, self.stride
        return (h - r1) // s + 1, (w - r2) // s + 1

    @property
    def kind(self) -> str:
        h, w = self.image_hw
        if self.kernel.shape == (1, w) and self.kernel.all():
            return "rows"
        if self.kernel.shape == (h, 1) and self.kernel.all():
            return "columns"
        return "kernel"

    def _to_image(self, t: np.ndarray) -> np.ndarray:
        h, w = self.image_hw
        if t.shape[-2:] == (h, w):
            return t
        out = np.zeros(t.shape[:-2] + (h, w))
        out[..., : t.shape[-2], : t.shape[-1]] = t
        return out

    def stamp(self, v: np.ndarray) -> np.ndarray:
        """Unclipped expansion ``tconv(v, k, s)`` on the image grid."""
        kind = self.kind
        v = np.asarray(v, dtype=np.float64)
        h, w = self.image_hw
        if kind == "rows":
            return np.broadcast_to(v, v.shape[:-1] + (w,)).copy()
        if kind == "columns":
            return np.broadcast_to(v, v.shape[:-2] + (h, v.shape[-1])).copy()
        return self._to_image(tconv_map(v, self.kernel, self.stride))

    def expand(self, v: np.ndarray) -> np.ndarray:
        return np.minimum(self.stamp(v), 1.0)

    def pull(self, g: np.ndarray) -> np.ndarray:
        """Adjoint of :meth:`stamp`: ``conv(g, k, s)`` on the selection grid."""
        kind = self.kind
        g = np.asarray(g, dtype=np.float64)
        if kind == "rows":
            return g.sum(axis=-1, keepdims=True)
        if kind == "columns":
            return g.sum(axis=-2, keepdims=True)
        return conv_map(g, self.kernel, self.stride)

    def supports(self) -> np.ndarray:
        """Boolean ``[a*b, h, w]`` pixel support of every group."""
        if self._supports is None:
            a, b = self.grid_shape
            eye = np.eye(a * b).reshape(a * b, a, b)
            self._supports = self.stamp(eye) > 0
        return self._supports


def _nonzero_pixels(mask: np.ndarray, hw) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim == 3:
        mask = np.any(mask != 0, axis=-1)
    if mask.shape != tuple(hw):
        raise ValueError(f"mask shape {mask.shape} does not match image {tuple(hw)}")
    return mask != 0


def expand_group_mask(v, spec: GroupSpec) -> np.ndarray:
    """Pixel mask ``[h, w, 1]`` for a binary group selection ``v`` on the grid."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != spec.grid_shape:
        raise ValueError(f"selection shape {v.shape} does not match grid {spec.grid_shape}")
    return spec.expand(v)[..., None]


def group_mask_gradient(g_m, spec: GroupSpec) -> np.ndarray:
    """Gradient on the selection grid from a pixel-mask gradient ``[h, w, 1]``."""
    g = np.asarray(g_m, dtype=np.float64)
    if g.ndim == 3:
        g = g[..., 0]
    if g.shape != spec.image_hw:
        raise ValueError(f"gradient shape {g.shape} does not match image {spec.image_hw}")
    return spec.pull(g)


# ---------------------------------------------------------------------------
# group l0 norms
# ---------------------------------------------------------------------------


def _cover_problem(pixel_mask, spec: GroupSpec):
    nz = _nonzero_pixels(pixel_mask, spec.image_hw)
    pix = np.flatnonzero(nz.reshape(-1))
    if pix.size == 0:
        return 0, []
    sup = spec.supports().reshape(len(spec.supports()), -1)[:, pix]
    bits = 1 << np.arange(pix.size, dtype=object)
    covered = sup.any(axis=0)
    if not covered.all():
        raise GroupL0Infeasible(f"{int((~covered).sum())} perturbed pixel(s) lie outside every group")
    sets = {}
    for row in sup:
        if row.any():
            sets.setdefault(int(np.sum(bits[row])), None)
    return pix.size, list(sets)


def _prune_dominated(sets: list[int]) -> list[int]:
    sets = sorted(sets, key=lambda s: -bin(s).count("1"))
    kept = []
    for s in sets:
        if not any(s | t == t for t in kept):
            kept.append(s)
    return kept


def _greedy_cover(full: int, sets: list[int]) -> int:
    left, used = full, 0
    while left:
        best = max(sets, key=lambda s: bin(s & left).count("1"))
        left &= ~best
        used += 1
    return used


def min_cover(n_items: int, sets: list[int], cap: int) -> int:
    """Size of the smallest sub-family of ``sets`` covering ``n_items`` bits.

    Branch and bound: branch on the uncovered item with fewest covering
    sets, bound by ``depth + ceil(uncovered / largest remaining gain)``.
    Raises :class:`GroupL0CapExceeded` when no cover of size ``<= cap`` exists.
    """
    full = (1 << n_items) - 1
    if full == 0:
        return 0
    sets = _prune_dominated(sets)
    greedy = _greedy_cover(full, sets)
    best = min(greedy, cap + 1)
    owners = [[s for s in sets if s >> i & 1] for i in range(n_items)]

    def search(left: int, depth: int):
        nonlocal best
        if left == 0:
            best = min(best, depth)
            return
        gain = max(bin(s & left).count("1") for s in sets)
        need = -(-bin(left).count("1") // gain)
        if depth + need >= best:
            return
        # most constrained uncovered item
        pick, pick_n = -1, None
        rest = left
        while rest:
            low = rest & -rest
            i = low.bit_length() - 1
            cnt = len(owners[i])
            if pick_n is None or cnt < pick_n:
                pick, pick_n = i, cnt
            rest ^= low
        for s in sorted(owners[pick], key=lambda s: -bin(s & left).count("1")):
            search(left & ~s, depth + 1)

    search(full, 0)
    if best > cap:
        raise GroupL0CapExceeded(f"minimum cover needs more than {cap} groups")
    return best


def exact_group_l0(pixel_mask, spec: GroupSpec, cap: int = 8) -> int:
    """Minimum number of groups whose union covers every perturbed pixel."""
    n_items, sets = _cover_problem(pixel_mask, spec)
    return min_cover(n_items, sets, cap)


def approx_group_l0(pixel_mask, v, spec: GroupSpec) -> int:
    """Selected groups whose region holds at least one perturbed pixel.

    ``v`` must cover every perturbed pixel, otherwise ``ValueError``.
    """
    nz = _nonzero_pixels(pixel_mask, spec.image_hw)
    v = np.asarray(v)
    if v.shape != spec.grid_shape:
        raise ValueError(f"selection shape {v.shape} does not match grid {spec.grid_shape}")
    sel = v != 0
    if np.any(nz & ~(spec.expand(sel.astype(np.float64)) > 0)):
        raise ValueError("selection does not cover every perturbed pixel")
    hit = spec.pull(nz.astype(np.float64)) > 0
    return int(np.count_nonzero(hit & sel))


# ---------------------------------------------------------------------------
# structured sPGD
# ---------------------------------------------------------------------------


class GroupLift:
    structured = True

    def __init__(self, spec: GroupSpec):
        self.spec = spec
        self.grid_shape = spec.grid_shape

    def expand(self, v):
        return self.spec.expand(v)[..., None]

    def soft_expand(self, s):
        return np.minimum(self.spec.stamp(s), 1.0)[..., None]

    def pull(self, g_m):
        return self.spec.pull(g_m[..., 0])

    def group_norm(self, delta, v):
        return np.array([approx_group_l0(d, vi, self.spec) for d, vi in zip(delta, v)], dtype=np.int64)


def spgd_structured_attack(model: Model, x, y, spec: GroupSpec, cfg: SpgdConfig, indices=None,
                           callback=None) -> AttackOutcome:
    """sPGD under a budget of ``cfg.eps`` groups drawn from ``spec``."""
    x = np.asarray(x, dtype=np.float64)
    if tuple(x.shape[1:3]) != spec.image_hw:
        raise ValueError(f"images {x.shape[1:3]} do not match group spec {spec.image_hw}")
    return run_sparse_pgd(model, x, y, cfg, GroupLift(spec), indices, callback)


# ---------------------------------------------------------------------------
# exact / approximate ratio simulation
# ---------------------------------------------------------------------------


def ratio_simulation(spec: GroupSpec, eps_range, n_samples: int = 100, seed: int = 0, cap: int = 8):
    """Mean and spread of ``exact / approximate`` group norms for random selections.

    For every ``eps`` draws ``n_samples`` selections with exactly ``eps``
    groups, perturbs their full support and compares the minimum cover with
    the selection count.  Samples whose minimum cover exceeds ``cap`` are
    counted as skipped.
    """
    rng = np.random.default_rng(seed)
    a, b = spec.grid_shape
    rows = []
    for eps in eps_range:
        eps = int(eps)
        ratios, skipped = [], 0
        for _ in range(n_samples):
            v = np.zeros(a * b)
            v[rng.choice(a * b, size=min(eps, a * b), replace=False)] = 1.0
            v = v.reshape(a, b)
            mask = spec.expand(v)
            approx = approx_group_l0(mask, v, spec)
            try:
                exact = exact_group_l0(mask, spec, cap=cap)
            except GroupL0CapExceeded:
                skipped += 1
                continue
            ratios.append(exact / approx)
        rows.append({
            "eps": eps,
            "mean": float(np.mean(ratios)) if ratios else float("nan"),
            "std": float(np.std(ratios)) if ratios else float("nan"),
            "samples": len(ratios),
            "skipped": skipped,
        })
    return rows


# ---------------------------------------------------------------------------
# pattern files
# ---------------------------------------------------------------------------


def load_pattern(path) -> np.ndarray:
    """Read a kernel: a ``"r c"`` header, then ``r`` lines of ``c`` 0/1 digits."""
    lines = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or len(lines[0]) != 2:
        raise ValueError(f"{path}: expected 'rows cols' header")
    r, c = int(lines[0][0]), int(lines[0][1])
    body = lines[1:]
    if len(body) != r or any(len(row) != c for row in body):
        raise ValueError(f"{path}: expected {r} rows of {c} entries")
    k = np.array([[int(t) for t in row] for row in body], dtype=np.float64)
    if not np.all(np.isin(k, (0, 1))):
        raise ValueError(f"{path}: entries must be 0 or 1")
    return k


def save_pattern(kernel, path) -> None:
    k = np.asarray(kernel).astype(int)
    text = [f"{k.shape[0]} {k.shape[1]}"] + [" ".join(str(t) for t in row) for row in k]
    Path(path).write_text("\n".join(text) + "\n")
