"""Model selection over component counts and block counts.

Two protocols are supported.  The equal-K grid fits every (G, K)
combination with the same number of variable blocks in each component and
keeps the BIC-best cell.  The varying-K protocol fits one model per G in
which every component picks its own block count by silhouette at each
covariance refresh, then compares the G values by BIC.

Cells are independent: each derives its own seed from the grid seed and
its coordinates, so results are bit-identical whether the grid runs
serially or across a process pool.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from time import perf_counter
from typing import Optional

import numpy as np

from .data import CountMatrix, OffsetVector
from .errors import AllCellsFailed, MplnError
from .seeding import TAG_CELL, derive_seed
from .vem import EqualK, FitConfig, FitResult, SilhouetteK, fit

__all__ = [
    "bic",
    "GridCell",
    "SelectionGrid",
    "grid_search_equal_k",
    "fit_varying_k",
    "save_grid",
]

GRID_COLUMNS = (
    "G",
    "k_spec",
    "lower_bound",
    "p",
    "bic",
    "converged",
    "iterations",
    "wall_time_ms",
)

_MODE_EQUAL = 0
_MODE_VARYING = 1


def bic(lower_bound: float, p: int, n: int) -> float:
    """Bayesian information criterion on the bound scale; larger is better."""
    if p < 1:
        raise ValueError(f"p must be at least 1, got {p}")
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    return 2.0 * float(lower_bound) - p * np.log(n)


@dataclass
class GridCell:
    """Outcome of one grid cell; ``error`` is set when the fit failed."""

    g: int
    k_label: str  # "2" for equal-K cells, "2;3" for per-component counts
    lower_bound: Optional[float]
    p: Optional[int]
    bic: Optional[float]
    converged: Optional[bool]
    iterations: Optional[int]
    wall_time_ms: float
    error: Optional[str] = None
    k_sort: tuple = ()  # block counts as a tuple, for tie-breaking

    @property
    def failed(self) -> bool:
        return self.error is not None


@dataclass
class SelectionGrid:
    mode: str  # "equal" or "varying"
    g_values: list
    k_values: Optional[list]  # equal mode
    k_max: Optional[int]  # varying mode
    cells: list
    best_g: Optional[int] = None
    best_k_label: Optional[str] = None


def _strip_state(result: FitResult) -> FitResult:
    result.state = None
    return result


def _run_equal_cell(args):
    counts, offsets, g, k, config = args
    start = perf_counter()
    try:
        result = fit(counts, offsets, g, EqualK(k), config)
    except MplnError as exc:
        elapsed = 1000.0 * (perf_counter() - start)
        cell = GridCell(g, str(k), None, None, None, None, None, elapsed,
                        error=f"{type(exc).__name__}: {exc}", k_sort=(k,))
        return cell, None
    elapsed = 1000.0 * (perf_counter() - start)
    cell = GridCell(
        g, str(k), result.lower_bound, result.model.n_free_parameters,
        result.bic, result.converged, result.iterations, elapsed, k_sort=(k,),
    )
    return cell, _strip_state(result)


def _run_varying_cell(args):
    counts, offsets, g, k_max, config = args
    start = perf_counter()
    try:
        result = fit(counts, offsets, g, SilhouetteK(k_max), config)
    except MplnError as exc:
        elapsed = 1000.0 * (perf_counter() - start)
        cell = GridCell(g, "", None, None, None, None, None, elapsed,
                        error=f"{type(exc).__name__}: {exc}")
        return cell, None
    elapsed = 1000.0 * (perf_counter() - start)
    ks = tuple(part.k for part in result.model.groupings)
    cell = GridCell(
        g, ";".join(str(k) for k in ks), result.lower_bound,
        result.model.n_free_parameters, result.bic, result.converged,
        result.iterations, elapsed, k_sort=ks,
    )
    return cell, _strip_state(result)


def _run_cells(worker, tasks, jobs):
    if jobs <= 1:
        return [worker(task) for task in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(worker, tasks))


def _select_best(pairs):
    """BIC argmax over non-failed cells, preferring converged ones.

    Ties go to the smaller (G, block counts).  Returns (cell, result) or
    raises AllCellsFailed when nothing fit.
    """
    fitted = [(cell, result) for cell, result in pairs if not cell.failed]
    if not fitted:
        raise AllCellsFailed(
            [(f"G={cell.g} K={cell.k_label or '?'}", cell.error)
             for cell, _ in pairs]
        )
    converged = [(cell, result) for cell, result in fitted if cell.converged]
    pool = converged if converged else fitted
    return max(pool, key=lambda pair: (pair[0].bic, -pair[0].g, tuple(-k for k in pair[0].k_sort)))


def _cell_config(config: FitConfig, mode: int, g: int, k: int) -> FitConfig:
    return replace(config, seed=derive_seed(config.seed, TAG_CELL, mode, g, k))


def grid_search_equal_k(
    counts: CountMatrix,
    offsets: OffsetVector,
    g_max: int,
    k_max: int,
    config: Optional[FitConfig] = None,
    jobs: int = 1,
):
    """Fit every (G, K) with equal per-component block counts; BIC picks.

    Returns (best FitResult, SelectionGrid).  Failed cells stay in the grid
    marked with their error but are excluded from selection.
    """
    if config is None:
        config = FitConfig()
    if counts.n < 2:
        raise ValueError("grid search needs at least 2 observations")
    if g_max < 1 or k_max < 1:
        raise ValueError("g_max and k_max must be at least 1")
    if k_max > counts.d:
        raise ValueError(f"k_max={k_max} exceeds the number of variables {counts.d}")
    tasks = [
        (counts, offsets, g, k, _cell_config(config, _MODE_EQUAL, g, k))
        for g in range(1, g_max + 1)
        for k in range(1, k_max + 1)
    ]
    pairs = _run_cells(_run_equal_cell, tasks, jobs)
    best_cell, best_result = _select_best(pairs)
    grid = SelectionGrid(
        mode="equal",
        g_values=list(range(1, g_max + 1)),
        k_values=list(range(1, k_max + 1)),
        k_max=None,
        cells=[cell for cell, _ in pairs],
        best_g=best_cell.g,
        best_k_label=best_cell.k_label,
    )
    return best_result, grid


def fit_varying_k(
    counts: CountMatrix,
    offsets: OffsetVector,
    g_max: int,
    k_max: int,
    config: Optional[FitConfig] = None,
    jobs: int = 1,
):
    """One silhouette-guided fit per G in 1..g_max; BIC compares across G."""
    if config is None:
        config = FitConfig()
    if counts.n < 2:
        raise ValueError("model selection needs at least 2 observations")
    if g_max < 1:
        raise ValueError("g_max must be at least 1")
    if not 2 <= k_max <= counts.d:
        raise ValueError(
            f"k_max must be between 2 and d={counts.d}, got {k_max}"
        )
    tasks = [
        (counts, offsets, g, k_max, _cell_config(config, _MODE_VARYING, g, 0))
        for g in range(1, g_max + 1)
    ]
    pairs = _run_cells(_run_varying_cell, tasks, jobs)
    best_cell, best_result = _select_best(pairs)
    grid = SelectionGrid(
        mode="varying",
        g_values=list(range(1, g_max + 1)),
        k_values=None,
        k_max=k_max,
        cells=[cell for cell, _ in pairs],
        best_g=best_cell.g,
        best_k_label=best_cell.k_label,
    )
    return best_result, grid


def save_grid(grid: SelectionGrid, path, include_timing: bool = True) -> None:
    """Write the grid as CSV.

    Failed cells leave the numeric columns empty and put the error class in
    the ``converged`` column.  With ``include_timing=False`` the
    wall_time_ms column is written as 0 so that repeated runs produce
    byte-identical files.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(GRID_COLUMNS)
        for cell in grid.cells:
            timing = repr(float(cell.wall_time_ms)) if include_timing else "0.0"
            if cell.failed:
                writer.writerow(
                    [cell.g, cell.k_label, "", "", "", "failed", "", timing]
                )
            else:
                writer.writerow(
                    [
                        cell.g,
                        cell.k_label,
                        repr(float(cell.lower_bound)),
                        cell.p,
                        repr(float(cell.bic)),
                        "true" if cell.converged else "false",
                        cell.iterations,
                        timing,
                    ]
                )
