"""Cellwise-robust location/scatter with per-cell outlier weights.

Estimates (mu, Sigma, W) by block-coordinate descent on a penalized
observed-data Gaussian likelihood: rows contribute the likelihood of their
kept cells only, every zero weight costs a per-column penalty, each column
must keep at least h cells, and the smallest eigenvalue of Sigma is bounded
below. Both block updates provably never increase the objective.

Rows are grouped by identical weight patterns and the linear algebra is
batched per pattern size, so the cost scales with the number of distinct
patterns rather than the number of rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2, norm, rankdata

from ._linalg import tri_solve_lower, tri_solve_lower_t
from .numeric_core import (
    DegenerateDataError,
    MaskedMatrix,
    column_unimcd,
    marginal_cutoff,
    marginal_flag,
    robust_zscores,
)

_LN_2PI = float(np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# penalties

@dataclass(frozen=True)
class CellPenalty:
    """Per-column cost of flagging a cell.

    In reference mode the penalty is q_j = t + ln(2*pi*v_j) with t a
    chi-square quantile and v_j a reference variance, so that a cell whose
    squared conditional z-score exceeds t gets dropped when Sigma is diagonal.
    The drop decision is then evaluated as ln(cond_var/v_j) + z^2 - t, which
    keeps the comparison invariant under per-column rescaling of the data.
    """

    threshold: float | None = None
    ref_variances: np.ndarray | None = None
    raw: np.ndarray | None = None

    @classmethod
    def from_reference(cls, variances, p: float = 0.99) -> "CellPenalty":
        variances = np.asarray(variances, dtype=float)
        if np.any(variances <= 0.0):
            raise ValueError("reference variances must be positive")
        return cls(threshold=float(chi2.ppf(p, df=1)), ref_variances=variances)

    @classmethod
    def from_values(cls, q) -> "CellPenalty":
        q = np.asarray(q, dtype=float)
        if np.any(q < 0.0):
            raise ValueError("penalties must be nonnegative")
        return cls(raw=q)

    def values(self) -> np.ndarray:
        """The penalty vector q."""
        if self.raw is not None:
            return self.raw.copy()
        return self.threshold + np.log(2.0 * np.pi * self.ref_variances)

    def keep_score(self, cond_var, z2, j: int):
        """Deviance of keeping a cell minus its penalty; positive wants a drop."""
        if self.raw is not None:
            return np.log(2.0 * np.pi * np.asarray(cond_var)) + z2 - self.raw[j]
        return (
            np.log(np.asarray(cond_var) / self.ref_variances[j])
            + z2
            - self.threshold
        )

    def marginal_cutoff(self) -> float:
        if self.raw is not None:
            return marginal_cutoff()
        return float(np.sqrt(self.threshold))


def _as_penalty(q, sigma_diag=None, flag_p: float = 0.99) -> CellPenalty:
    if q is None:
        return CellPenalty.from_reference(sigma_diag, p=flag_p)
    if isinstance(q, CellPenalty):
        return q
    return CellPenalty.from_values(q)


# ---------------------------------------------------------------------------
# pattern grouping and batched Gaussian conditionals

def _as_arrays(X) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(X, MaskedMatrix):
        return X.values, X.mask
    X = np.asarray(X, dtype=float)
    return X, np.isfinite(X)


@dataclass(frozen=True)
class _Groups:
    patterns: np.ndarray   # (G, d) bool
    sizes: np.ndarray      # (G,)
    row_order: np.ndarray  # row indices sorted by group
    starts: np.ndarray     # (G+1,) offsets into row_order

    def rows_of(self, gids) -> tuple[np.ndarray, np.ndarray]:
        """Concatenated row indices for the given groups and, per row, the
        position of its group within ``gids``."""
        chunks = [self.row_order[self.starts[g]:self.starts[g + 1]] for g in gids]
        counts = [c.size for c in chunks]
        rows = np.concatenate(chunks) if chunks else np.empty(0, dtype=int)
        grp = np.repeat(np.arange(len(gids)), counts)
        return rows, grp


def _group_patterns(kept: np.ndarray) -> _Groups:
    patterns, inverse = np.unique(kept, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    counts = np.bincount(inverse, minlength=patterns.shape[0])
    starts = np.concatenate(([0], np.cumsum(counts)))
    return _Groups(
        patterns=patterns,
        sizes=patterns.sum(axis=1),
        row_order=order,
        starts=starts,
    )


def _cols_of(patterns: np.ndarray, p: int) -> np.ndarray:
    """Column index matrix (g, p) for patterns that all have p ones."""
    return np.nonzero(patterns)[1].reshape(patterns.shape[0], p)


def _row_nll(values: np.ndarray, kept: np.ndarray, mu: np.ndarray,
             sigma: np.ndarray) -> np.ndarray:
    """Per-row ln|Sigma_PP| + |P| ln(2 pi) + MD^2 on the kept cells.

    Rows with an empty kept pattern contribute zero.
    """
    n = values.shape[0]
    out = np.zeros(n)
    groups = _group_patterns(kept)
    for p in np.unique(groups.sizes):
        if p == 0:
            continue
        gids = np.flatnonzero(groups.sizes == p)
        cols = _cols_of(groups.patterns[gids], p)
        spp = sigma[cols[:, :, None], cols[:, None, :]]
        chol = np.linalg.cholesky(spp)
        logdets = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
        rows, grp = groups.rows_of(gids)
        dev = values[rows[:, None], cols[grp]] - mu[cols[grp]]
        z = tri_solve_lower(chol[grp], dev[:, :, None])[:, :, 0]
        md2 = np.einsum("np,np->n", z, z)
        out[rows] = logdets[grp] + p * _LN_2PI + md2
    return out


def _estep_moments(values: np.ndarray, kept: np.ndarray, mu: np.ndarray,
                   sigma: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Conditional means for all non-kept cells plus summed conditional
    covariances, grouped by pattern."""
    n, d = values.shape
    xhat = np.empty((n, d))
    csum = np.zeros((d, d))
    groups = _group_patterns(kept)
    for p in np.unique(groups.sizes):
        gids = np.flatnonzero(groups.sizes == p)
        rows, grp = groups.rows_of(gids)
        if p == 0:
            xhat[rows] = mu
            csum += rows.size * sigma
            continue
        cols = _cols_of(groups.patterns[gids], p)
        xs = values[rows[:, None], cols[grp]]
        xhat[rows[:, None], cols[grp]] = xs
        if p == d:
            continue
        comp = _cols_of(~groups.patterns[gids], d - p)
        spp = sigma[cols[:, :, None], cols[:, None, :]]
        spm = sigma[cols[:, :, None], comp[:, None, :]]
        chol = np.linalg.cholesky(spp)
        v = tri_solve_lower(chol, spm)                      # (g, p, d-p)
        b = tri_solve_lower_t(chol, v)                      # Sigma_PP^{-1} Sigma_PM
        cmm = sigma[comp[:, :, None], comp[:, None, :]] - np.einsum(
            "gpm,gpl->gml", v, v)
        dev = xs - mu[cols[grp]]
        cond = mu[comp[grp]] + np.einsum("np,npm->nm", dev, b[grp])
        xhat[rows[:, None], comp[grp]] = cond
        counts = np.bincount(grp, minlength=len(gids))
        for t in range(len(gids)):
            csum[np.ix_(comp[t], comp[t])] += counts[t] * cmm[t]
    return xhat, 0.5 * (csum + csum.T)


def _conditional_cell_stats(values, kept_ex, rows, j, mu, sigma):
    """Conditional mean and variance of coordinate j for the given rows,
    conditioning each row on its kept cells other than j."""
    m = rows.size
    cmean = np.empty(m)
    cvar = np.empty(m)
    groups = _group_patterns(kept_ex)
    for p in np.unique(groups.sizes):
        gids = np.flatnonzero(groups.sizes == p)
        pos, grp = groups.rows_of(gids)
        if p == 0:
            cmean[pos] = mu[j]
            cvar[pos] = sigma[j, j]
            continue
        cols = _cols_of(groups.patterns[gids], p)
        spp = sigma[cols[:, :, None], cols[:, None, :]]
        spj = sigma[cols, j]                                # (g, p)
        chol = np.linalg.cholesky(spp)
        v = tri_solve_lower(chol, spj[:, :, None])
        w = tri_solve_lower_t(chol, v)[:, :, 0]             # Sigma_PP^{-1} Sigma_Pj
        cv = sigma[j, j] - np.einsum("gpr,gpr->g", v, v)
        dev = values[rows[pos][:, None], cols[grp]] - mu[cols[grp]]
        cmean[pos] = mu[j] + np.einsum("np,np->n", dev, w[grp])
        cvar[pos] = cv[grp]
    return cmean, cvar


def _conditional_single(x, kept, j, mu, sigma):
    idx = np.flatnonzero(kept)
    if idx.size == 0:
        return float(mu[j]), float(sigma[j, j])
    chol = np.linalg.cholesky(sigma[np.ix_(idx, idx)])
    v = tri_solve_lower(chol, sigma[idx, j][:, None])
    w = tri_solve_lower_t(chol, v)[:, 0]
    cvar = float(sigma[j, j] - (v[:, 0] @ v[:, 0]))
    cmean = float(mu[j] + (x[idx] - mu[idx]) @ w)
    return cmean, cvar


# ---------------------------------------------------------------------------
# objective and block updates

def objective(X, W, mu, sigma, q) -> float:
    """Penalized negative observed log-likelihood of the kept cells.

    Missing cells contribute to neither the likelihood nor the penalty term.
    """
    values, obs = _as_arrays(X)
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    kept = np.asarray(W).astype(bool) & obs
    penalty = _as_penalty(q, sigma_diag=np.diag(sigma))
    nll = _row_nll(values, kept, mu, sigma).sum()
    zeros = (obs & ~kept).sum(axis=0)
    return float(nll + penalty.values() @ zeros)


def update_w(X, W, mu, sigma, q, h: int) -> np.ndarray:
    """One sweep of cell-weight updates at fixed (mu, Sigma).

    Cells are visited in row-major order; only strictly improving flips are
    applied. Because rows are conditionally independent, all rows of one
    column are decided together. When more cells demand dropping than the
    column floor allows, the drops go to the largest deviances (ties to the
    lower row index). The result never increases the objective.
    """
    values, obs = _as_arrays(X)
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    penalty = _as_penalty(q, sigma_diag=np.diag(sigma))
    W = np.asarray(W).astype(np.int8).copy()
    W[~obs] = 0
    kept = W.astype(bool) & obs
    d = values.shape[1]
    for j in range(d):
        rows = np.flatnonzero(obs[:, j])
        if rows.size == 0:
            continue
        kept_ex = kept[rows].copy()
        kept_ex[:, j] = False
        cmean, cvar = _conditional_cell_stats(values, kept_ex, rows, j, mu, sigma)
        z2 = (values[rows, j] - cmean) ** 2 / cvar
        score = penalty.keep_score(cvar, z2, j)
        cur = kept[rows, j]
        want_zero = np.where(cur, score > 0.0, score >= 0.0)
        cap = rows.size - min(h, rows.size)
        if int(want_zero.sum()) > cap:
            cand = np.flatnonzero(want_zero)
            order = np.lexsort((rows[cand], -score[cand]))
            want_zero = np.zeros(rows.size, dtype=bool)
            want_zero[cand[order[:cap]]] = True
        kept[rows, j] = ~want_zero
        W[rows, j] = (~want_zero).astype(np.int8)
    return W


@dataclass(frozen=True)
class EmUpdate:
    location: np.ndarray
    scatter: np.ndarray
    sweeps: int
    delta: float


def update_mu_sigma(X, W, mu, sigma, *, fixed_center: bool = False,
                    eig_floor: float, max_sweeps: int = 20,
                    tol: float = 1e-8) -> EmUpdate:
    """EM refit of (mu, Sigma) treating flagged and missing cells as latent.

    The E-step imputes conditional means and accumulates conditional
    covariances per weight pattern; the M-step recomputes the complete-data
    MLE (divisor n). With ``fixed_center`` the location stays at the supplied
    value. Convergence is declared when the parameter change, measured in
    units of the previous scatter diagonal, drops below ``tol``; afterwards
    eigenvalues are floored at ``eig_floor`` by spectral truncation.
    """
    values, obs = _as_arrays(X)
    if not obs.any(axis=0).all():
        j = int(np.argmin(obs.any(axis=0)))
        raise DegenerateDataError(f"column {j} is entirely unobserved")
    mu = np.asarray(mu, dtype=float).copy()
    sigma = np.asarray(sigma, dtype=float).copy()
    kept = np.asarray(W).astype(bool) & obs
    n = values.shape[0]
    sweeps = 0
    delta = np.inf
    for _ in range(max_sweeps):
        xhat, csum = _estep_moments(values, kept, mu, sigma)
        mu_new = mu if fixed_center else xhat.mean(axis=0)
        dev = xhat - mu_new
        sigma_new = (dev.T @ dev + csum) / n
        sigma_new = 0.5 * (sigma_new + sigma_new.T)
        ref = np.sqrt(np.diag(sigma))
        delta = max(
            float(np.max(np.abs(mu_new - mu) / ref)),
            float(np.max(np.abs(sigma_new - sigma) / np.outer(ref, ref))),
        )
        mu, sigma = mu_new, sigma_new
        sweeps += 1
        if delta < tol:
            break
    sigma = _floor_eigenvalues(sigma, eig_floor)
    return EmUpdate(location=mu, scatter=sigma, sweeps=sweeps, delta=delta)


def _floor_eigenvalues(sigma: np.ndarray, floor: float) -> np.ndarray:
    # reconstruct only when the floor binds; a no-op keeps the matrix bitwise
    # intact, which matters for exact scaling equivariance
    if np.linalg.eigvalsh(sigma)[0] >= floor:
        return sigma
    evals, evecs = np.linalg.eigh(sigma)
    out = (evecs * np.maximum(evals, floor)) @ evecs.T
    return 0.5 * (out + out.T)


# ---------------------------------------------------------------------------
# initialization

def gaussian_rank_correlation(X: MaskedMatrix) -> np.ndarray:
    """Correlation of normal scores, computed on pairwise-complete cells."""
    d = X.n_cols
    R = np.eye(d)
    values, mask = X.values, X.mask
    for j in range(d):
        for k in range(j + 1, d):
            both = mask[:, j] & mask[:, k]
            m = int(both.sum())
            if m < 3:
                continue
            u = norm.ppf(rankdata(values[both, j]) / (m + 1))
            v = norm.ppf(rankdata(values[both, k]) / (m + 1))
            u -= u.mean()
            v -= v.mean()
            denom = np.sqrt((u @ u) * (v @ v))
            if denom > 0.0:
                R[j, k] = R[k, j] = (u @ v) / denom
    return R


@dataclass(frozen=True)
class InitState:
    location: np.ndarray
    scatter: np.ndarray
    W0: np.ndarray
    column_scales: np.ndarray
    eig_floor: float


def initialize(X: MaskedMatrix, h: int, *, fixed_center: bool = False,
               flag_p: float = 0.99, eig_floor: float | None = None) -> InitState:
    """Starting point: univariate MCD per column, Gaussian-rank correlation,
    and marginal z-score flags."""
    locs, scales = column_unimcd(X, h)
    if fixed_center:
        locs = np.zeros(X.n_cols)
    R = gaussian_rank_correlation(X)
    evals = np.linalg.eigvalsh(R)
    if evals[0] < 1e-6:
        # pairwise-complete correlations need not be PSD; repair is scale-free
        evals, evecs = np.linalg.eigh(R)
        R = (evecs * np.maximum(evals, 1e-6)) @ evecs.T
        R = 0.5 * (R + R.T)
    sigma0 = scales[:, None] * R * scales[None, :]
    sigma0 = 0.5 * (sigma0 + sigma0.T)
    a = float(eig_floor) if eig_floor is not None else float(
        1e-3 * np.median(scales ** 2))
    sigma0 = _floor_eigenvalues(sigma0, a)
    z = robust_zscores(X, locs, scales)
    W0 = marginal_flag(z, marginal_cutoff(flag_p))
    return InitState(location=locs, scatter=sigma0, W0=W0,
                     column_scales=scales, eig_floor=a)


# ---------------------------------------------------------------------------
# model and fit

@dataclass
class CellMcdModel:
    """Fitted cellwise-robust location/scatter with per-cell weights."""

    location: np.ndarray
    scatter: np.ndarray
    cell_weights: np.ndarray
    penalties: np.ndarray
    h: int
    eig_floor: float
    objective_trace: list[float] = field(default_factory=list)
    fixed_center: bool = False
    penalty: CellPenalty | None = None
    n_iterations: int = 0
    converged: bool = False

    @property
    def n_cols(self) -> int:
        return self.location.shape[0]


def fit_cellmcd(X, h: int, *, q=None, eig_floor: float | None = None,
                fixed_center: bool = False, flag_p: float = 0.99,
                max_iter: int = 100, em_sweeps: int = 20, em_tol: float = 1e-8,
                seed=None) -> CellMcdModel:
    """Block-coordinate descent on the penalized observed likelihood.

    Alternates the EM refit of (mu, Sigma) with the cell-weight sweep until
    the weights stabilize, recording the objective after every outer
    iteration. The procedure is deterministic; ``seed`` is accepted for
    interface symmetry only.

    Parameters
    ----------
    X : MaskedMatrix or array
        Data; NaN entries of a plain array count as missing.
    h : int
        Column support floor: every column keeps at least h cells
        (clamped to its observed count).
    q : array or CellPenalty, optional
        Per-column flagging penalties. Default: calibrated from the initial
        robust variances so a lone cell is dropped when its squared z-score
        exceeds chi2_{1,flag_p}, and kept fixed during the descent.
    """
    del seed
    if not isinstance(X, MaskedMatrix):
        X = MaskedMatrix.from_values(X)
    n = X.n_rows
    if not 1 <= h <= n:
        raise ValueError(f"h={h} out of range for n={n}")
    init = initialize(X, h, fixed_center=fixed_center, flag_p=flag_p,
                      eig_floor=eig_floor)
    penalty = _as_penalty(q, sigma_diag=np.diag(init.scatter), flag_p=flag_p)
    a = init.eig_floor
    mu, sigma = init.location, init.scatter
    W = init.W0
    trace = [objective(X, W, mu, sigma, penalty)]
    converged = False
    iterations = 0
    for _ in range(max_iter):
        em = update_mu_sigma(X, W, mu, sigma, fixed_center=fixed_center,
                             eig_floor=a, max_sweeps=em_sweeps, tol=em_tol)
        mu, sigma = em.location, em.scatter
        W_new = update_w(X, W, mu, sigma, penalty, h)
        trace.append(objective(X, W_new, mu, sigma, penalty))
        stable = np.array_equal(W_new, W)
        W = W_new
        iterations += 1
        if stable and em.sweeps == 1:
            converged = True
            break
    _check_nondegenerate(X, W)
    return CellMcdModel(
        location=mu, scatter=sigma, cell_weights=W,
        penalties=penalty.values(), h=int(h), eig_floor=a,
        objective_trace=trace, fixed_center=fixed_center, penalty=penalty,
        n_iterations=iterations, converged=converged,
    )


def _check_nondegenerate(X: MaskedMatrix, W: np.ndarray) -> None:
    kept = W.astype(bool) & X.mask
    for j in range(X.n_cols):
        vals = X.values[kept[:, j], j]
        if vals.size and vals.max() == vals.min():
            name = X.column_names[j] if X.column_names else str(j)
            raise DegenerateDataError(
                f"column {name} is constant after cell flagging"
            )


# ---------------------------------------------------------------------------
# single-row operations

def impute_row(x, w_row, mu, sigma, x_mask=None) -> np.ndarray:
    """Replace flagged/missing cells by their conditional mean given the
    kept cells; kept cells pass through unchanged."""
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    mask = np.isfinite(x) if x_mask is None else np.asarray(x_mask, bool)
    kept = np.asarray(w_row).astype(bool) & mask
    out = np.where(kept, x, 0.0)
    fill = ~kept
    if not fill.any():
        return out
    idx = np.flatnonzero(kept)
    if idx.size == 0:
        return mu.copy()
    midx = np.flatnonzero(fill)
    chol = np.linalg.cholesky(sigma[np.ix_(idx, idx)])
    b = tri_solve_lower_t(chol, tri_solve_lower(chol, sigma[np.ix_(idx, midx)]))
    out[midx] = mu[midx] + (x[idx] - mu[idx]) @ b
    return out


def flag_row(x, mu, sigma, q, *, x_mask=None, max_sweeps: int = 50) -> np.ndarray:
    """Cell weights for a single (possibly new) observation at fixed
    (mu, Sigma).

    Starts from the marginal z-score rule, then sweeps the cells in fixed
    order accepting strictly improving flips until a fixed point. There is no
    column floor for a single row. Missing cells always get weight zero.
    """
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    mask = np.isfinite(x) if x_mask is None else np.asarray(x_mask, bool)
    penalty = _as_penalty(q, sigma_diag=np.diag(sigma))
    d = x.shape[0]
    z = np.where(mask, (x - mu) / np.sqrt(np.diag(sigma)), np.nan)
    kept = marginal_flag(z[None, :], penalty.marginal_cutoff())[0].astype(bool)
    kept &= mask
    for _ in range(max_sweeps):
        changed = False
        for j in range(d):
            if not mask[j]:
                continue
            rest = kept.copy()
            rest[j] = False
            cmean, cvar = _conditional_single(x, rest, j, mu, sigma)
            score = penalty.keep_score(cvar, (x[j] - cmean) ** 2 / cvar, j)
            new = (score <= 0.0) if kept[j] else (score < 0.0)
            if new != kept[j]:
                kept[j] = new
                changed = True
        if not changed:
            break
    return kept.astype(np.int8)


def flag_rows(X, mu, sigma, q, *, max_sweeps: int = 50) -> np.ndarray:
    """flag_row applied to every row of a masked matrix."""
    values, obs = _as_arrays(X)
    penalty = _as_penalty(q, sigma_diag=np.diag(sigma))
    out = np.empty(values.shape, dtype=np.int8)
    for i in range(values.shape[0]):
        out[i] = flag_row(values[i], mu, sigma, penalty, x_mask=obs[i],
                          max_sweeps=max_sweeps)
    return out


def impute_rows(X, W, mu, sigma) -> np.ndarray:
    """Batched conditional-mean imputation of flagged and missing cells."""
    values, obs = _as_arrays(X)
    kept = np.asarray(W).astype(bool) & obs
    xhat, _ = _estep_moments(values, kept, np.asarray(mu, float),
                             np.asarray(sigma, float))
    return xhat
