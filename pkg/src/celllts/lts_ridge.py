"""Ridge-penalized least trimmed squares on symmetrized data.

The ridge penalty is folded into the trimming objective by appending d
pseudo-rows sqrt(lambda)*e_j with zero response; those rows are pinned inside
every fitting subset, so each constrained C-step still lowers

    sum_{l in H} (y_l - x_l' b)^2 + lambda ||b||^2

and the usual FastLTS search (random elemental starts, two warm C-steps,
full iteration of the best candidates) applies unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._linalg import tri_solve_lower, tri_solve_lower_t
from .numeric_core import DegenerateDataError, marginal_cutoff, unimcd, unimcd_consistency


@dataclass
class LtsFit:
    """Trimmed ridge fit on the pair scale (standardized, no intercept)."""

    slope_std: np.ndarray      # slopes on the standardized scale
    active_set: np.ndarray     # sorted indices of the retained pairs
    objective: float           # trimmed sum of squares + ridge term
    n_csteps: int
    scale_resid: float         # consistency-corrected sd of active residuals
    case_weights: np.ndarray | None = None


def augment_ridge(x, y, lam: float):
    """Append the d ridge pseudo-rows sqrt(lam)*e_j with response zero.

    Returns (xe, ye, fixed) where ``fixed`` indexes the appended rows; their
    summed squared residuals at any slope vector b equal lam * ||b||^2.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if lam <= 0.0:
        raise ValueError("ridge penalty must be positive")
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ValueError("x must be (n, d) with matching response length")
    n, d = x.shape
    xe = np.vstack([x, np.sqrt(lam) * np.eye(d)])
    ye = np.concatenate([y, np.zeros(d)])
    fixed = np.arange(n, n + d)
    return xe, ye, fixed


def _ls_solve(xe, ye, rows):
    a = xe[rows]
    gram = a.T @ a
    rhs = (a.T @ ye[rows])[:, None]
    chol = np.linalg.cholesky(gram)
    return tri_solve_lower_t(chol, tri_solve_lower(chol, rhs))[:, 0]


def cstep(xe, ye, subset, fixed):
    """One constrained concentration step.

    Refits least squares on subset + fixed rows, then retains the len(subset)
    genuine rows with the smallest squared residuals (ties to the lower row
    index). Returns (beta, next_subset, objective); the objective, evaluated
    at beta on next_subset + fixed, never exceeds the one on subset.
    """
    subset = np.asarray(subset, dtype=int)
    fixed = np.asarray(fixed, dtype=int)
    h = subset.size
    beta = _ls_solve(xe, ye, np.concatenate([subset, fixed]))
    genuine = np.ones(xe.shape[0], dtype=bool)
    genuine[fixed] = False
    genuine = np.flatnonzero(genuine)
    r = ye - xe @ beta
    r2 = r[genuine] ** 2
    order = np.argsort(r2, kind="stable")[:h]
    next_subset = np.sort(genuine[order])
    obj = float(r2[order].sum() + (r[fixed] ** 2).sum())
    return beta, next_subset, obj


def fit_lts_ridge(x, y, h_sub: int, lam: float, *, n_starts: int = 500,
                  seed=None, n_finalists: int = 10, warm_steps: int = 2,
                  max_csteps: int = 500) -> LtsFit:
    """Trimmed ridge regression by constrained FastLTS.

    ``n_starts`` random (d+1)-row elemental fits each receive ``warm_steps``
    C-steps; the ``n_finalists`` best candidates iterate to a fixed point and
    the lowest objective wins (ties broken by start index, so the result does
    not depend on evaluation order). Deterministic given ``seed``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n, d = x.shape
    if not d < h_sub <= n:
        raise ValueError(f"subset size {h_sub} must be in ({d}, {n}]")
    xe, ye, fixed = augment_ridge(x, y, lam)
    h = int(h_sub)

    def initial_subset(beta):
        r2 = (y - x @ beta) ** 2
        return np.sort(np.argsort(r2, kind="stable")[:h])

    n_csteps = 0
    candidates = []
    for s, child in enumerate(np.random.SeedSequence(seed).spawn(n_starts)):
        rng = np.random.default_rng(child)
        elem = rng.choice(n, size=min(d + 1, n), replace=False)
        beta = _ls_solve(xe, ye, np.concatenate([elem, fixed]))
        subset = initial_subset(beta)
        obj = np.inf
        for _ in range(warm_steps):
            beta, subset, obj = cstep(xe, ye, subset, fixed)
            n_csteps += 1
        candidates.append((obj, s, subset))
    candidates.sort(key=lambda c: (c[0], c[1]))

    best = None
    for obj, s, subset in candidates[:n_finalists]:
        beta = None
        for _ in range(max_csteps):
            beta, nxt, obj = cstep(xe, ye, subset, fixed)
            n_csteps += 1
            if np.array_equal(nxt, subset):
                break
            subset = nxt
        if best is None or obj < best[0]:
            best = (obj, beta, subset)

    obj, beta, active = best
    r_active = y[active] - x[active] @ beta
    raw = float(np.std(r_active, ddof=1)) if h >= 2 else 0.0
    scale = raw * unimcd_consistency(h / n)
    return LtsFit(slope_std=beta, active_set=active, objective=obj,
                  n_csteps=n_csteps, scale_resid=scale)


@dataclass(frozen=True)
class ReweightedFit:
    """Ridge refit on the pairs whose two endpoint cases both survive the
    residual cut."""

    slope_std: np.ndarray
    case_weights: np.ndarray     # 0/1 per case
    location_std: float          # robust location of the case residuals
    scale_std: float             # robust scale of the case residuals
    n_pairs_used: int


def reweighted_fit(pair_x, pair_y, first, second, fit: LtsFit, case_x, case_y,
                   lam: float, h_case: int, cutoff: float | None = None) -> ReweightedFit:
    """Weight the actual cases by their standardized residuals, then refit.

    Case residuals are taken against the trimmed slopes, centered at the
    univariate MCD location and scaled by its consistent scale; cases beyond
    ``cutoff`` get weight zero. The final slopes come from a ridge fit (same
    penalty) on the pairs whose two originating cases both kept weight one.
    """
    if cutoff is None:
        cutoff = marginal_cutoff()
    case_x = np.asarray(case_x, dtype=float)
    case_y = np.asarray(case_y, dtype=float)
    r = case_y - case_x @ fit.slope_std
    loc = unimcd(r, h_case)
    if loc.scale == 0.0:
        w = np.ones(r.size, dtype=np.int8)
    else:
        w = (np.abs(r - loc.location) <= cutoff * loc.scale).astype(np.int8)
    good = (w[first] == 1) & (w[second] == 1)
    d = pair_x.shape[1]
    if int(good.sum()) < d + 1:
        raise DegenerateDataError("fewer than d+1 pairs survive reweighting")
    xs = np.asarray(pair_x, dtype=float)[good]
    ys = np.asarray(pair_y, dtype=float)[good]
    gram = xs.T @ xs + lam * np.eye(d)
    chol = np.linalg.cholesky(gram)
    beta = tri_solve_lower_t(chol, tri_solve_lower(chol, (xs.T @ ys)[:, None]))[:, 0]
    fit.case_weights = w
    return ReweightedFit(slope_std=beta, case_weights=w,
                         location_std=float(loc.location),
                         scale_std=float(loc.scale),
                         n_pairs_used=int(good.sum()))
