"""Attack campaigns over models x attacks x budgets x seeds, CSV reports, transfer."""

from __future__ import annotations

import csv
import io
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ensemble import DESK_ITERS, STAGES, run_stage, saa
from .models import predict_labels
from .spgd import AttackOutcome, pixel_l0
from .structured import GroupSpec

CSV_VERSION = "#spalab-csv-v1"
CSV_HEADER = ["index", "clean_correct", "attack", "success", "iterations", "l0", "group_l0", "time_ms"]
ATTACKS = STAGES + ("saa",)


@dataclass
class Row:
    index: int
    clean_correct: bool
    attack: str
    success: bool
    iterations: int
    l0: int
    group_l0: int
    time_ms: int = 0


@dataclass
class CampaignResult:
    rows: list[Row] = field(default_factory=list)

    def cells(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.attack not in seen:
                seen.append(r.attack)
        return seen

    def aggregates(self) -> dict:
        """Recomputed from the rows on every call."""
        out = {}
        for cell in self.cells():
            rows = [r for r in self.rows if r.attack == cell]
            correct = [r for r in rows if r.clean_correct]
            broken = [r for r in correct if r.success]
            hist: dict[int, int] = {}
            for r in broken:
                hist[r.iterations] = hist.get(r.iterations, 0) + 1
            out[cell] = {
                "n": len(rows),
                "clean_acc": len(correct) / len(rows) if rows else 0.0,
                "robust_acc": 1.0 - len(broken) / len(correct) if correct else 0.0,
                "robust_acc_overall": (len(correct) - len(broken)) / len(rows) if rows else 0.0,
                "success_iterations": dict(sorted(hist.items())),
            }
        return out

    def to_csv(self, include_time: bool = False) -> str:
        buf = io.StringIO()
        buf.write(CSV_VERSION + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([
                r.index,
                int(r.clean_correct),
                r.attack,
                int(r.success),
                r.iterations,
                r.l0,
                r.group_l0,
                r.time_ms if include_time else 0,
            ])
        return buf.getvalue()

    def write_csv(self, path, include_time: bool = False) -> None:
        Path(path).write_text(self.to_csv(include_time), encoding="utf-8")

    @classmethod
    def read_csv(cls, path) -> "CampaignResult":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != CSV_VERSION:
            raise ValueError(f"{path}: missing {CSV_VERSION} header")
        reader = csv.DictReader(lines[1:])
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        rows = [
            Row(int(d["index"]), d["clean_correct"] == "1", d["attack"], d["success"] == "1", int(d["iterations"]),
                int(d["l0"]), int(d["group_l0"]), int(d["time_ms"]))
            for d in reader
        ]
        return cls(rows)


def cell_name(model: str, attack: str, eps: int, seed: int, iters: int | None = None) -> str:
    name = f"{model}/{attack}/eps={eps}/seed={seed}"
    return name if iters is None else f"{name}/T={iters}"


def _run_attack(attack, model, x, y, eps, iters, seed, spec, eps_inf, indices) -> AttackOutcome:
    if attack != "saa":
        return run_stage(attack, model, x, y, eps, iters, seed, spec, eps_inf, indices)
    rep = saa(model, x, y, eps, spec=spec, eps_inf=eps_inf, per_stage_iters=iters, seed=seed, indices=indices)
    group = np.full(len(x), -1 if spec is None else 0, dtype=np.int64)
    if spec is not None:
        # group norm reported by the stage that broke each instance
        rem = np.arange(len(x))
        for out in rep.outcomes:
            hit = out.success & ~out.clean_wrong
            group[rem[hit]] = out.group_l0[hit]
            rem = rem[~out.success]
    return AttackOutcome(
        success=~rep.robust,
        iterations=rep.stage_iterations.sum(axis=1),
        delta=rep.delta,
        l0=pixel_l0(rep.delta),
        group_l0=group,
        clean_wrong=rep.broken_by == -2,
        mask=np.any(rep.delta != 0, axis=-1, keepdims=True).astype(np.float64),
    )


def _chunk_job(args):
    attack, model, x, y, eps, iters, seed, spec, eps_inf, indices = args
    t0 = time.perf_counter()
    out = _run_attack(attack, model, x, y, eps, iters, seed, spec, eps_inf, indices)
    return out, (time.perf_counter() - t0) * 1000.0


def run_campaign(models: dict, dataset, attacks, budgets, seeds=(0,), iters=None, spec: GroupSpec | None = None,
                 eps_inf: float = 1.0, iteration_sweep=None, workers: int = 1, chunk: int = 100) -> CampaignResult:
    """Run every (model, attack, budget, seed) cell over every instance.

    ``iters`` maps attack name to its iteration/query budget (the cascade
    takes a 3-tuple).  ``iteration_sweep`` optionally replaces the single
    budget by a list of budgets, adding one cell per value.  Instances are
    split into chunks that may run in worker processes; rows are merged back
    in instance order, so the result does not depend on ``workers``.
    """
    if not models or not attacks:
        raise ValueError("need at least one model and one attack")
    for a in attacks:
        if a not in ATTACKS:
            raise ValueError(f"unknown attack {a!r}; choose from {ATTACKS}")
    iters = dict(iters or {})
    x, y = dataset.images, dataset.labels
    n = len(x)
    result = CampaignResult()
    for mname, model in models.items():
        correct = predict_labels(model, x) == y
        for attack in attacks:
            default = DESK_ITERS if attack == "saa" else iters.get(attack, 300)
            budgets_t = iteration_sweep if iteration_sweep is not None else [iters.get(attack, default)]
            for eps in budgets:
                for seed in seeds:
                    for T in budgets_t:
                        jobs = [
                            (attack, model, x[s : s + chunk], y[s : s + chunk], int(eps), T, int(seed), spec, eps_inf,
                             np.arange(s, min(s + chunk, n)))
                            for s in range(0, n, chunk)
                        ]
                        if workers > 1:
                            with ProcessPoolExecutor(workers) as pool:
                                parts = list(pool.map(_chunk_job, jobs))
                        else:
                            parts = [_chunk_job(j) for j in jobs]
                        name = cell_name(mname, attack, int(eps), int(seed), T if iteration_sweep is not None else None)
                        for (s, (out, ms)) in zip(range(0, n, chunk), parts):
                            per = int(round(ms / max(len(out.success), 1)))
                            for k in range(len(out.success)):
                                i = s + k
                                result.rows.append(Row(
                                    index=i,
                                    clean_correct=bool(correct[i]),
                                    attack=name,
                                    success=bool(out.success[k] and correct[i]),
                                    iterations=int(out.iterations[k]),
                                    l0=int(out.l0[k]),
                                    group_l0=int(out.group_l0[k]),
                                    time_ms=per,
                                ))
    return result


def transfer_eval(source, target, dataset, attack: str = "spgd_unproj", eps: int = 10, iters: int = 300,
                  seed: int = 0, spec: GroupSpec | None = None, eps_inf: float = 1.0) -> dict:
    """Craft perturbations on ``source`` and test them on ``target``.

    The attack success rate is measured over instances ``target`` classifies
    correctly before perturbation.
    """
    x, y = dataset.images, dataset.labels
    if source.input_shape != target.input_shape:
        raise ValueError(f"input shapes differ: {source.input_shape} vs {target.input_shape}")
    out = _run_attack(attack, source, x, y, eps, iters if attack != "saa" else (iters,) * 3, seed, spec, eps_inf,
                      np.arange(len(x)))
    tgt_clean = predict_labels(target, x) == y
    tgt_adv = predict_labels(target, np.clip(x + out.delta, 0.0, 1.0)) == y
    src_clean = predict_labels(source, x) == y
    fooled = tgt_clean & ~tgt_adv
    return {
        "transfer_asr": float(fooled.sum() / tgt_clean.sum()) if tgt_clean.any() else 0.0,
        "direct_asr": float((out.success & src_clean).sum() / src_clean.sum()) if src_clean.any() else 0.0,
        "target_clean_correct": int(tgt_clean.sum()),
        "source_clean_correct": int(src_clean.sum()),
    }
