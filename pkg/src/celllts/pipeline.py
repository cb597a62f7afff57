"""The two-step cellwise-robust regression estimator.

Step 1 cleans the regressors without looking at the response: a cellwise
robust scatter is fit on symmetrized predictors (center pinned at the origin,
scatter halved afterwards), per-column robust locations are added, cells are
flagged row by row at the fixed (location, scatter), and flagged or missing
cells are imputed by their Gaussian conditional means.

Step 2 regresses the response on the cleaned matrix: both sides are
symmetrized and standardized, the slopes come from trimmed ridge regression
with case-level reweighting, the intercept from the robust location of the
case-level pseudo residuals, and everything is mapped back to original units.

Out-of-sample prediction applies the same row flagging and imputation to the
new observation before multiplying by the coefficients, so a training row fed
back in reproduces its in-sample fitted value bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .cellmcd import (
    CellMcdModel,
    CellPenalty,
    _conditional_single,
    fit_cellmcd,
    flag_row,
    impute_row,
)
from .lts_ridge import LtsFit, fit_lts_ridge, reweighted_fit
from .numeric_core import (
    DegenerateDataError,
    MaskedMatrix,
    column_unimcd,
    marginal_cutoff,
    unimcd,
)
from .symmetrize import make_pairs, pair_subset_size


@dataclass(frozen=True)
class CellLtsOptions:
    """Tuning knobs of the estimator; the defaults match common robust
    practice (75% subsets, tiny ridge, 20 permutations, 1% flagging rate)."""

    h_fraction: float = 0.75
    ridge_lambda: float = 1e-4
    pair_scheme: str = "kperm"
    k: int = 20
    seed: int | None = 0
    flag_quantile: float = 0.99
    n_starts: int = 500

    def __post_init__(self):
        if not 0.5 < self.h_fraction <= 1.0:
            raise ValueError("h_fraction must be in (0.5, 1]")
        if self.ridge_lambda <= 0.0:
            raise ValueError("ridge_lambda must be positive")
        if self.pair_scheme not in ("kperm", "full"):
            raise ValueError("pair_scheme must be 'kperm' or 'full'")
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if not 0.0 < self.flag_quantile < 1.0:
            raise ValueError("flag_quantile must be in (0, 1)")
        if self.n_starts < 1:
            raise ValueError("n_starts must be at least 1")


@dataclass(frozen=True)
class StandardizationRecord:
    """Scales/centers that map the internal standardized problem back to
    original units."""

    column_scales: np.ndarray
    response_scale: float
    column_centers: np.ndarray


@dataclass
class CellLtsModel:
    """Fitted model: coefficients on the original scale plus everything
    needed to clean and predict new observations."""

    intercept: float
    slopes: np.ndarray
    cov_model: CellMcdModel
    standardization: StandardizationRecord
    resid_scale: float
    case_weights: np.ndarray
    fitted: np.ndarray
    imputed: np.ndarray
    options: dict
    lts: LtsFit | None = None
    column_names: tuple[str, ...] | None = None
    response_name: str | None = None

    @property
    def coefficients(self) -> np.ndarray:
        """Intercept and slopes as one vector."""
        return np.concatenate(([self.intercept], self.slopes))

    @property
    def n_cols(self) -> int:
        return self.slopes.shape[0]


class Prediction(NamedTuple):
    yhat: float
    cell_weights: np.ndarray
    imputed: np.ndarray


def fit_celllts(X, y, options: CellLtsOptions | None = None) -> CellLtsModel:
    """Fit the two-step estimator.

    Parameters
    ----------
    X : MaskedMatrix or array of shape (n, d)
        Regressors; NaN entries of a plain array count as missing.
    y : array of shape (n,)
        Response; NaN entries are allowed. Rows with a missing response still
        inform the predictor cleaning but are excluded from the regression
        step.
    """
    opts = options if options is not None else CellLtsOptions()
    if not isinstance(X, MaskedMatrix):
        X = MaskedMatrix.from_values(X)
    y = np.asarray(y, dtype=float)
    n, d = X.n_rows, X.n_cols
    if y.shape != (n,):
        raise ValueError("response length must match the number of rows")
    if n <= d + 1:
        raise ValueError(f"need more than d+1={d + 1} rows, got {n}")
    h = math.ceil(opts.h_fraction * n)
    seed_x, seed_y, seed_lts = np.random.SeedSequence(opts.seed).spawn(3)

    # -- step 1: clean the regressors (response never consulted) -----------
    pairs_x = make_pairs(X, opts.pair_scheme, opts.k, seed_x)
    h_pair = pair_subset_size(h, n, pairs_x.n_pairs)
    pair_cov = fit_cellmcd(
        pairs_x.as_masked(), h_pair, fixed_center=True,
        flag_p=opts.flag_quantile,
    )
    sigma_x = pair_cov.scatter / 2.0  # differences have twice the covariance
    mu_x, _ = column_unimcd(X, h)
    penalty = CellPenalty.from_reference(np.diag(sigma_x), p=opts.flag_quantile)
    w_x = np.empty((n, d), dtype=np.int8)
    imputed = np.empty((n, d))
    for i in range(n):
        w_x[i] = flag_row(X.values[i], mu_x, sigma_x, penalty, x_mask=X.mask[i])
        imputed[i] = impute_row(X.values[i], w_x[i], mu_x, sigma_x,
                                x_mask=X.mask[i])

    # -- step 2: trimmed ridge regression on the cleaned matrix ------------
    obs_y = np.isfinite(y)
    n_y = int(obs_y.sum())
    if n_y <= d + 1:
        raise DegenerateDataError("too few rows with an observed response")
    h_y = math.ceil(opts.h_fraction * n_y)
    pairs = make_pairs(imputed[obs_y], opts.pair_scheme, opts.k, seed_y,
                       y=y[obs_y])
    h_pair_y = pair_subset_size(h_y, n_y, pairs.n_pairs)
    sd_y = unimcd(pairs.y, h_pair_y).scale
    if sd_y <= 0.0:
        raise DegenerateDataError("response scale is zero")
    scales_x = np.sqrt(np.diag(sigma_x))
    x_tilde = pairs.x / scales_x
    y_tilde = pairs.y / sd_y
    lts = fit_lts_ridge(x_tilde, y_tilde, h_pair_y, opts.ridge_lambda,
                        n_starts=opts.n_starts, seed=seed_lts)
    rew = reweighted_fit(
        x_tilde, y_tilde, pairs.first, pairs.second, lts,
        case_x=imputed[obs_y] / scales_x, case_y=y[obs_y] / sd_y,
        lam=opts.ridge_lambda, h_case=h_y,
        cutoff=marginal_cutoff(opts.flag_quantile),
    )
    slopes = rew.slope_std * sd_y / scales_x

    # intercept and residual scale from the case-level pseudo residuals
    pseudo = y[obs_y] - imputed[obs_y] @ slopes
    res = unimcd(pseudo, h_y)
    intercept = res.location
    resid_scale = res.scale

    case_weights = np.zeros(n, dtype=np.int8)
    case_weights[obs_y] = rew.case_weights

    # fitted values through the same per-row path predict() uses
    fitted = np.empty(n)
    for i in range(n):
        fitted[i] = intercept + float(imputed[i] @ slopes)

    cov_model = CellMcdModel(
        location=mu_x, scatter=sigma_x, cell_weights=w_x,
        penalties=penalty.values(), h=h, eig_floor=pair_cov.eig_floor / 2.0,
        objective_trace=pair_cov.objective_trace, fixed_center=False,
        penalty=penalty, n_iterations=pair_cov.n_iterations,
        converged=pair_cov.converged,
    )
    return CellLtsModel(
        intercept=float(intercept), slopes=slopes, cov_model=cov_model,
        standardization=StandardizationRecord(
            column_scales=scales_x, response_scale=float(sd_y),
            column_centers=mu_x,
        ),
        resid_scale=float(resid_scale), case_weights=case_weights,
        fitted=fitted, imputed=imputed, options=asdict(opts), lts=lts,
        column_names=X.column_names,
    )


def predict(model: CellLtsModel, x_new, x_mask=None) -> Prediction:
    """Robust prediction for a possibly contaminated or incomplete row.

    The row is first flagged at the fitted (location, scatter), flagged and
    missing cells are imputed by their conditional means, and only then are
    the coefficients applied.
    """
    x = np.asarray(x_new, dtype=float)
    if x.shape != (model.n_cols,):
        raise ValueError(f"expected {model.n_cols} predictor values")
    cov = model.cov_model
    penalty = cov.penalty if cov.penalty is not None else cov.penalties
    w = flag_row(x, cov.location, cov.scatter, penalty, x_mask=x_mask)
    ximp = impute_row(x, w, cov.location, cov.scatter, x_mask=x_mask)
    yhat = model.intercept + float(ximp @ model.slopes)
    return Prediction(yhat=yhat, cell_weights=w, imputed=ximp)


@dataclass(frozen=True)
class CellResiduals:
    """Standardized cellwise residuals for map rendering.

    ``flags`` has one column per predictor plus one for the response, coded
    1 = kept, 0 = flagged, -1 = missing.
    """

    predictor_stdres: np.ndarray
    response_stdres: np.ndarray
    flags: np.ndarray
    column_names: tuple[str, ...] | None = None
    response_name: str | None = None


def cell_residuals(model: CellLtsModel, X, y=None,
                   flag_cutoff: float | None = None) -> CellResiduals:
    """Per-cell standardized residuals under the fitted model.

    Each predictor cell is compared against its conditional mean given the
    row's other kept cells and standardized by the conditional standard
    deviation; the response residual is standardized by the robust residual
    scale. Missing cells are NaN in the residual matrices and -1 in ``flags``.
    """
    if not isinstance(X, MaskedMatrix):
        X = MaskedMatrix.from_values(X)
    if X.n_cols != model.n_cols:
        raise ValueError("column count does not match the model")
    if flag_cutoff is None:
        flag_cutoff = marginal_cutoff(model.options.get("flag_quantile", 0.99))
    n, d = X.n_rows, X.n_cols
    cov = model.cov_model
    penalty = cov.penalty if cov.penalty is not None else cov.penalties
    stdres = np.full((n, d), np.nan)
    flags = np.full((n, d + 1), -1, dtype=np.int8)
    yres = np.full(n, np.nan)
    y = None if y is None else np.asarray(y, dtype=float)
    for i in range(n):
        w = flag_row(X.values[i], cov.location, cov.scatter, penalty,
                     x_mask=X.mask[i])
        kept = w.astype(bool) & X.mask[i]
        for j in range(d):
            if not X.mask[i, j]:
                continue
            rest = kept.copy()
            rest[j] = False
            cmean, cvar = _conditional_single(X.values[i], rest, j,
                                              cov.location, cov.scatter)
            stdres[i, j] = (X.values[i, j] - cmean) / np.sqrt(cvar)
            flags[i, j] = 1 if kept[j] else 0
        if y is not None and np.isfinite(y[i]):
            ximp = impute_row(X.values[i], w, cov.location, cov.scatter,
                              x_mask=X.mask[i])
            r = (y[i] - model.intercept - float(ximp @ model.slopes))
            yres[i] = r / model.resid_scale
            flags[i, d] = 1 if abs(yres[i]) <= flag_cutoff else 0
    names = X.column_names or model.column_names
    return CellResiduals(predictor_stdres=stdres, response_stdres=yres,
                         flags=flags, column_names=names,
                         response_name=model.response_name)


def breakdown_mstar(n: int) -> int:
    """Largest per-column contamination count the symmetrized pipeline can
    absorb; the ratio to n tends to 1 - 1/sqrt(2) ~ 0.2929.

    Uses exact integer arithmetic on the discriminant, so it is valid for
    arbitrarily large n.
    """
    if n < 2:
        raise ValueError("n must be at least 2")
    disc = 2 * n * n - 2 * n + 1
    root = math.isqrt(disc)
    return (2 * n - 1 - root + 1) // 2


def breakdown_limit_ratio() -> float:
    """Limit of breakdown_mstar(n)/n as n grows."""
    return 1.0 - 1.0 / math.sqrt(2.0)
