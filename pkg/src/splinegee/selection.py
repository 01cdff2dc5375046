"""Knot-count selection by delete-cluster-out cross-validation."""

from __future__ import annotations

import itertools
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from splinegee.covariance import Structure, WorkingCovarianceSpec
from splinegee.data import Dataset
from splinegee.errors import GeeError, SelectionError
from splinegee.estimator import FitConfig, fit_gee, get_link
from splinegee.spline_basis import build_additive_basis

log = logging.getLogger(__name__)

MAX_GRID = 200


@dataclass(frozen=True)
class CvPlan:
    folds: int = 5
    knot_grid: Sequence = tuple(range(0, 11))
    """Shared counts ``(0, 1, ...)`` or one sequence per dimension ``((0, 1), (0, 2))``."""
    seed: int = 0
    score: str = "squared_error"
    rule: str = "quantile"

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("need at least two folds")
        if self.score != "squared_error":
            raise ValueError(f"unsupported CV score {self.score!r}")

    def candidates(self, D: int) -> list[tuple[int, ...]]:
        grid = list(self.knot_grid)
        per_dim = bool(grid) and not np.isscalar(grid[0])
        if per_dim:
            if len(grid) != D:
                raise ValueError(f"per-dimension knot grid has {len(grid)} entries for D={D}")
            combos = list(itertools.product(*[[int(k) for k in g] for g in grid]))
        else:
            combos = [(int(k),) * D for k in grid]
        if len(combos) > MAX_GRID:
            raise ValueError(f"knot grid has {len(combos)} combinations (limit {MAX_GRID})")
        # dedupe (D=0 collapses everything) while keeping order
        return list(dict.fromkeys(combos))


@dataclass(frozen=True)
class CvResult:
    chosen: tuple[int, ...]
    table: list[dict]


def assign_folds(dataset_or_n, folds: int, seed: int) -> np.ndarray:
    """Random partition of clusters into ``folds`` groups differing in size by at most one."""
    n = dataset_or_n if isinstance(dataset_or_n, (int, np.integer)) else dataset_or_n.n
    if n < folds:
        raise ValueError(f"{n} clusters cannot fill {folds} folds")
    rng = np.random.default_rng(seed)
    labels = np.empty(n, dtype=int)
    labels[rng.permutation(n)] = np.arange(n) % folds
    return labels


def fold_basis(dataset: Dataset, labels, fold: int, knots, degree: int = 3, rule: str = "quantile"):
    """Basis (knots and centering) for the fit that holds out ``fold``; built from training clusters only."""
    train = dataset.subset(np.flatnonzero(labels != fold))
    return build_additive_basis(train.pooled_T(), knots, degree, rule)


def _fold_score(dataset: Dataset, labels, fold, knots, link, structure, degree, rule, config) -> float:
    train = dataset.subset(np.flatnonzero(labels != fold))
    test = dataset.subset(np.flatnonzero(labels == fold))
    basis = fold_basis(dataset, labels, fold, knots, degree, rule)
    res = fit_gee(train, basis, link, WorkingCovarianceSpec(structure), config)
    pred = res.predict(test)
    return float(sum(np.sum((c.y - p) ** 2) for c, p in zip(test.clusters, pred)))


def _grid_point(args) -> tuple[float, str]:
    dataset, labels, folds, knots, link, structure, degree, rule, config = args
    total = 0.0
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            for f in range(folds):
                total += _fold_score(dataset, labels, f, knots, link, structure, degree, rule, config)
    except GeeError as exc:
        return float("nan"), f"{type(exc).__name__}: {exc}"
    except ValueError as exc:
        return float("nan"), f"ValueError: {exc}"
    if not np.isfinite(total):
        return float("nan"), "non-finite score"
    return total, ""


def cross_validate(
    dataset: Dataset,
    link,
    structure: Structure | str,
    plan: CvPlan | None = None,
    degree: int = 3,
    config: FitConfig | None = None,
    jobs: int = 1,
) -> CvResult:
    """Pick per-dimension interior-knot counts minimizing held-out squared error.

    Knots and centering are rebuilt from the training clusters of every fold;
    ``(rho, sigma2)`` are re-estimated inside each training fit.  Scores within
    a relative ``1e-8`` of the minimum count as ties and go to the candidate
    with the fewest total knots.
    """
    plan = plan or CvPlan()
    config = config or FitConfig()
    link = get_link(link, config.eta_clamp)
    structure = Structure.parse(structure)
    labels = assign_folds(dataset, plan.folds, plan.seed)
    combos = plan.candidates(dataset.D)
    jobs_args = [(dataset, labels, plan.folds, k, link, structure, degree, plan.rule, config) for k in combos]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            outcomes = list(ex.map(_grid_point, jobs_args))
    else:
        outcomes = [_grid_point(a) for a in jobs_args]
    table = []
    for k, (score, err) in zip(combos, outcomes):
        if err:
            log.warning("CV grid point %s skipped: %s", k, err)
        table.append({"knots": k, "score": score, "valid": not err, "error": err})
    valid = [row for row in table if row["valid"]]
    if not valid:
        raise SelectionError("every knot-grid candidate failed to fit")
    total_ss = float(np.sum(dataset.stacked("y") ** 2))
    best = min(row["score"] for row in valid)
    thresh = best * (1.0 + 1e-8) + 1e-12 * total_ss
    ties = [row for row in valid if row["score"] <= thresh]
    chosen = min(ties, key=lambda row: (sum(row["knots"]), row["knots"]))["knots"]
    return CvResult(tuple(chosen), table)
