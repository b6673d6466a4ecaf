"""Coarse-to-fine grid search over two positive hyperparameters.

The default schedule is a 5x5 logarithmic grid over user ranges followed by
one refinement: a grid of the same size spanning half a coarse cell on
either side of the best point.  Every evaluation is cached, so points shared
by two stages are scored once.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .analysis import psnr
from .operators import ForwardOperator
from .solver import SolverConfig, solve_inner

__all__ = ["GridResult", "coarse_to_fine", "tune_model", "write_table", "TUNED_PARAMS"]

TUNED_PARAMS = {"cpr": ("beta", "lam"), "ncpr": ("beta", "tau_scale")}


@dataclass
class GridResult:
    best: tuple[float, float]
    score: float
    names: tuple[str, str]
    table: list[dict] = field(default_factory=list)


def _axis(lo: float, hi: float, n: int) -> np.ndarray:
    if lo <= 0 or hi <= 0:
        raise ValueError("grid ranges must be positive for a logarithmic grid")
    if n == 1 or lo == hi:
        return np.array([float(np.sqrt(lo * hi))]) if lo != hi else np.array([float(lo)])
    return np.geomspace(lo, hi, n)


def coarse_to_fine(
    score: Callable[[float, float], float],
    range_a: tuple[float, float],
    range_b: tuple[float, float],
    n: int = 5,
    refinements: int = 1,
    names: tuple[str, str] = ("a", "b"),
) -> GridResult:
    """Maximise ``score(a, b)`` on nested logarithmic grids."""
    cache: dict[tuple[float, float], float] = {}
    table: list[dict] = []

    def run(axes_a, axes_b, stage):
        for a in axes_a:
            for b in axes_b:
                key = (float(a), float(b))
                if key not in cache:
                    cache[key] = float(score(*key))
                table.append({"stage": stage, names[0]: key[0], names[1]: key[1],
                              "score": cache[key]})

    ax_a = _axis(*range_a, n)
    ax_b = _axis(*range_b, n)
    run(ax_a, ax_b, 0)
    for stage in range(1, refinements + 1):
        best = max(cache, key=cache.get)
        new_axes = []
        for ax, centre in ((ax_a, best[0]), (ax_b, best[1])):
            if len(ax) < 2:
                new_axes.append(ax)
                continue
            # half a current step either side: the new grid is finer for every n >= 2
            half = float(np.exp(0.5 * np.mean(np.diff(np.log(ax)))))
            new_axes.append(np.geomspace(centre / half, centre * half, n))
        ax_a, ax_b = new_axes
        if all(len(ax) == 1 for ax in new_axes):
            break
        run(ax_a, ax_b, stage)
    best = max(cache, key=cache.get)
    return GridResult(best=best, score=cache[best], names=names, table=table)


def _apply(params, kind: str, a: float, b: float):
    p = params.with_beta(a)
    return p.with_lam(b) if kind == "cpr" else p.with_tau_scale(b)


def tune_model(
    params,
    pairs: Sequence[tuple[np.ndarray, np.ndarray]],
    H: ForwardOperator,
    range_beta: tuple[float, float],
    range_second: tuple[float, float],
    n: int = 5,
    refinements: int = 1,
    solver: SolverConfig | None = None,
    crop: int | None = None,
) -> GridResult:
    """Tune ``(beta, lam)`` for CPR or ``(beta, tau multiplier)`` for NCPR.

    ``pairs`` holds ``(ground_truth, measurement)`` tuples; the score is the
    mean PSNR of the reconstructions.
    """
    if not pairs:
        raise ValueError("validation set is empty")
    solver = solver or SolverConfig()
    kind = params.reg.kind

    def score(a, b):
        p = _apply(params, kind, a, b)
        vals = []
        for x_true, y in pairs:
            state, _ = solve_inner(p, H, y, solver)
            vals.append(min(psnr(state.x, x_true, crop=crop), 99.0))
        return float(np.mean(vals))

    return coarse_to_fine(score, range_beta, range_second, n, refinements, TUNED_PARAMS[kind])


def write_table(result: GridResult, path: str | Path) -> Path:
    path = Path(path)
    fields = ["stage", *result.names, "score"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(result.table)
    return path
