"""Monte Carlo harness: data generators, cellwise contamination, accuracy
metrics, an OLS baseline, and reproducible experiment grids.

Every (gamma, rep) cell owns a seed stream derived from the experiment seed,
so results are byte-identical however the work is split across workers.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields

import numpy as np

from .numeric_core import MaskedMatrix
from .pipeline import CellLtsOptions, fit_celllts, predict

_VALID_SIGMA = ("A09", "ALYZ")
_VALID_DIST = ("normal", "exponential", "lognormal")
_VALID_ESTIMATORS = ("CellLTS", "OLS")
WORKERS_ENV = "CELLLTS_WORKERS"


@dataclass(frozen=True)
class ExperimentConfig:
    n: int
    d: int
    eps: float
    gamma_grid: tuple[float, ...]
    sigma_kind: str = "A09"
    predictor_dist: str = "normal"
    r2: float = 0.9
    n_reps: int = 1
    seed: int = 0
    estimators: tuple[str, ...] = ("CellLTS", "OLS")
    record_runtime: bool = True
    h_fraction: float = 0.75
    ridge_lambda: float = 1e-4
    pair_scheme: str = "kperm"
    k: int = 20
    n_starts: int = 500

    def __post_init__(self):
        object.__setattr__(self, "gamma_grid",
                           tuple(float(g) for g in self.gamma_grid))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        if not 0.0 <= self.eps < 0.5:
            raise ValueError("eps must be in [0, 0.5)")
        if not 0.0 < self.r2 < 1.0:
            raise ValueError("r2 must be in (0, 1)")
        if self.sigma_kind not in _VALID_SIGMA:
            raise ValueError(f"sigma_kind must be one of {_VALID_SIGMA}")
        if self.predictor_dist not in _VALID_DIST:
            raise ValueError(f"predictor_dist must be one of {_VALID_DIST}")
        for est in self.estimators:
            if est not in _VALID_ESTIMATORS:
                raise ValueError(f"unknown estimator {est!r}")
        if self.n_reps < 1 or not self.gamma_grid:
            raise ValueError("need at least one replication and one gamma")


@dataclass(frozen=True)
class ResultRow:
    estimator: str
    gamma: float
    rep: int
    md: float
    mse: float
    runtime_seconds: float


# ---------------------------------------------------------------------------
# generators

def gen_sigma_a09(d: int) -> np.ndarray:
    """Covariance with entries (-0.9)^|i-j|."""
    if d < 1:
        raise ValueError("d must be at least 1")
    idx = np.arange(d)
    return (-0.9) ** np.abs(idx[:, None] - idx[None, :])


def gen_sigma_alyz(d: int, seed, cond: float = 100.0, tol: float = 1e-10,
                   max_rounds: int = 500) -> np.ndarray:
    """Random correlation matrix with condition number ``cond``.

    Draws a random orthogonal eigenbasis, assigns log-spaced eigenvalues, and
    alternates between re-imposing that spectrum and rescaling to unit
    diagonal until the diagonal is within ``tol`` of one right after the
    spectrum step.
    """
    if d < 2:
        raise ValueError("d must be at least 2")
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((d, d))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    target = np.logspace(0.0, np.log10(cond), d)
    target *= d / target.sum()
    sigma = (q * target) @ q.T
    for _ in range(max_rounds):
        scale = np.sqrt(np.diag(sigma))
        sigma = sigma / np.outer(scale, scale)
        evals, evecs = np.linalg.eigh(sigma)
        sigma = (evecs * target) @ evecs.T
        sigma = 0.5 * (sigma + sigma.T)
        if np.max(np.abs(np.diag(sigma) - 1.0)) < tol:
            return sigma
    raise RuntimeError("correlation rescaling did not converge")


def gen_predictors(n: int, d: int, dist: str, sigma, seed) -> np.ndarray:
    """Draw predictors with target covariance ``sigma``.

    The normal branch applies the Cholesky factor to standard normals. The
    skewed branches draw centered exponential(1) or centered standard
    lognormal columns and transform them linearly so the sample covariance
    equals ``sigma`` exactly.
    """
    rng = np.random.default_rng(seed)
    sigma = np.asarray(sigma, dtype=float)
    chol = np.linalg.cholesky(sigma)
    if dist == "normal":
        return rng.standard_normal((n, d)) @ chol.T
    if dist == "exponential":
        raw = rng.exponential(1.0, size=(n, d)) - 1.0
    elif dist == "lognormal":
        raw = rng.lognormal(0.0, 1.0, size=(n, d)) - np.exp(0.5)
    else:
        raise ValueError(f"unknown predictor distribution {dist!r}")
    s = np.cov(raw, rowvar=False, ddof=1)
    ls = np.linalg.cholesky(s)
    ls_inv = np.linalg.solve(ls, np.eye(d))
    return raw @ ls_inv.T @ chol.T


def default_slopes(d: int) -> np.ndarray:
    """True coefficients (d, d-1, ..., 1)."""
    return np.arange(d, 0, -1, dtype=float)


def gen_response(x, slopes, sigma, r2: float, seed) -> tuple[np.ndarray, float]:
    """Gaussian-noise response with error variance set to hit the target R^2:
    sigma^2 = b' Sigma b / (1/R^2 - 1)."""
    if not 0.0 < r2 < 1.0:
        raise ValueError("r2 must be in (0, 1)")
    x = np.asarray(x, dtype=float)
    slopes = np.asarray(slopes, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    sigma2 = float(slopes @ sigma @ slopes / (1.0 / r2 - 1.0))
    rng = np.random.default_rng(seed)
    y = x @ slopes + rng.normal(0.0, np.sqrt(sigma2), size=x.shape[0])
    return y, sigma2


def contaminate(m, eps: float, gamma: float, col_scales, seed,
                col_centers=None) -> tuple[np.ndarray, np.ndarray]:
    """Replace floor(eps*n) random cells per column by
    gamma * scale_j + center_j.

    Positions are drawn without replacement, so no cell is hit twice; the
    returned boolean mask records the ground truth.
    """
    m = np.array(m, dtype=float, copy=True)
    if m.ndim != 2:
        raise ValueError("expected a 2-d matrix")
    if not 0.0 <= eps < 0.5:
        raise ValueError("eps must be in [0, 0.5)")
    n, p = m.shape
    col_scales = np.asarray(col_scales, dtype=float)
    centers = np.zeros(p) if col_centers is None else np.asarray(col_centers, float)
    mask = np.zeros((n, p), dtype=bool)
    count = int(np.floor(eps * n))
    if count == 0:
        return m, mask
    rng = np.random.default_rng(seed)
    for j in range(p):
        idx = rng.choice(n, size=count, replace=False)
        m[idx, j] = gamma * col_scales[j] + centers[j]
        mask[idx, j] = True
    return m, mask


# ---------------------------------------------------------------------------
# metrics and the OLS baseline

def metric_md(slopes_hat, slopes, sigma_x, sigma2: float) -> float:
    """Covariance-weighted, noise-normalized coefficient distance."""
    if sigma2 <= 0.0:
        raise ValueError("sigma2 must be positive")
    delta = np.asarray(slopes_hat, float) - np.asarray(slopes, float)
    return float(np.sqrt(delta @ np.asarray(sigma_x, float) @ delta / sigma2))


def metric_mse(yhat, ystar) -> float:
    yhat = np.asarray(yhat, dtype=float)
    ystar = np.asarray(ystar, dtype=float)
    if yhat.shape != ystar.shape:
        raise ValueError("prediction/target length mismatch")
    return float(np.mean((yhat - ystar) ** 2))


@dataclass(frozen=True)
class OlsModel:
    intercept: float
    slopes: np.ndarray
    column_means: np.ndarray


def ols_fit(X, y) -> OlsModel:
    """Least squares baseline; missing predictor cells are mean-imputed."""
    if not isinstance(X, MaskedMatrix):
        X = MaskedMatrix.from_values(X)
    y = np.asarray(y, dtype=float)
    means = np.array([
        X.observed_column(j).mean() if X.mask[:, j].any() else 0.0
        for j in range(X.n_cols)
    ])
    filled = np.where(X.mask, X.values, means)
    rows = np.isfinite(y)
    a = np.column_stack([np.ones(int(rows.sum())), filled[rows]])
    coef, *_ = np.linalg.lstsq(a, y[rows], rcond=None)
    return OlsModel(intercept=float(coef[0]), slopes=coef[1:],
                    column_means=means)


def ols_predict(model: OlsModel, X) -> np.ndarray:
    if not isinstance(X, MaskedMatrix):
        X = MaskedMatrix.from_values(X)
    filled = np.where(X.mask, X.values, model.column_means)
    return model.intercept + filled @ model.slopes


# ---------------------------------------------------------------------------
# experiment runner

def _task_rows(cfg: ExperimentConfig, gi: int, rep: int) -> list[ResultRow]:
    gamma = cfg.gamma_grid[gi]
    task = np.random.SeedSequence(cfg.seed, spawn_key=(gi * cfg.n_reps + rep,))
    (s_sigma, s_xtr, s_noise, s_xte, s_noise_te,
     s_con_tr, s_con_te, s_est) = task.spawn(8)
    sigma = (gen_sigma_a09(cfg.d) if cfg.sigma_kind == "A09"
             else gen_sigma_alyz(cfg.d, s_sigma))
    slopes = default_slopes(cfg.d)
    x = gen_predictors(cfg.n, cfg.d, cfg.predictor_dist, sigma, s_xtr)
    y, sigma2 = gen_response(x, slopes, sigma, cfg.r2, s_noise)
    x_test = gen_predictors(cfg.n, cfg.d, cfg.predictor_dist, sigma, s_xte)
    y_star, _ = gen_response(x_test, slopes, sigma, cfg.r2, s_noise_te)

    scales = np.sqrt(np.diag(sigma))
    z = np.column_stack([x, y])
    z_con, _ = contaminate(z, cfg.eps, gamma,
                           np.concatenate([scales, [np.sqrt(sigma2)]]),
                           s_con_tr)
    x_con, y_con = z_con[:, :-1], z_con[:, -1]
    x_test_con, _ = contaminate(x_test, cfg.eps, gamma, scales, s_con_te)

    est_entropy = s_est.generate_state(len(cfg.estimators))
    rows = []
    for ei, name in enumerate(cfg.estimators):
        start = time.perf_counter()
        try:
            if name == "CellLTS":
                opts = CellLtsOptions(
                    h_fraction=cfg.h_fraction, ridge_lambda=cfg.ridge_lambda,
                    pair_scheme=cfg.pair_scheme, k=cfg.k,
                    seed=int(est_entropy[ei]), n_starts=cfg.n_starts,
                )
                model = fit_celllts(MaskedMatrix.from_values(x_con), y_con, opts)
                md = metric_md(model.slopes, slopes, sigma, sigma2)
                preds = [predict(model, row).yhat for row in x_test_con]
            else:
                model = ols_fit(MaskedMatrix.from_values(x_con), y_con)
                md = metric_md(model.slopes, slopes, sigma, sigma2)
                preds = ols_predict(model, MaskedMatrix.from_values(x_test_con))
            mse = metric_mse(np.asarray(preds), y_star)
        except Exception:
            md = mse = float("nan")
        elapsed = time.perf_counter() - start if cfg.record_runtime else 0.0
        rows.append(ResultRow(estimator=name, gamma=gamma, rep=rep,
                              md=md, mse=mse, runtime_seconds=elapsed))
    return rows


def run_experiment(cfg: ExperimentConfig, workers: int | None = None) -> list[ResultRow]:
    """Run the full (gamma x rep) grid and return canonically ordered rows.

    Worker count comes from the argument, the CELLLTS_WORKERS environment
    variable, or defaults to 1. Estimator failures yield NaN metrics for that
    row rather than aborting the grid.
    """
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    tasks = [(gi, rep)
             for gi in range(len(cfg.gamma_grid))
             for rep in range(cfg.n_reps)]
    if workers <= 1:
        chunks = [_task_rows(cfg, gi, rep) for gi, rep in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_task_rows, cfg, gi, rep)
                       for gi, rep in tasks]
            chunks = [f.result() for f in futures]
    rows = [row for chunk in chunks for row in chunk]
    rows.sort(key=lambda r: (r.estimator, r.gamma, r.rep))
    return rows


RESULT_HEADER = "estimator,gamma,rep,md,mse,runtime_seconds"


def write_results_csv(rows, path) -> None:
    lines = [RESULT_HEADER]
    for r in rows:
        lines.append(f"{r.estimator},{r.gamma!r},{r.rep},{r.md!r},{r.mse!r},"
                     f"{r.runtime_seconds!r}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_results_csv(path) -> list[ResultRow]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != RESULT_HEADER:
            raise ValueError(f"unexpected results header: {header!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 6:
                raise ValueError(f"malformed results row: {line!r}")
            rows.append(ResultRow(
                estimator=parts[0], gamma=float(parts[1]), rep=int(parts[2]),
                md=float(parts[3]), mse=float(parts[4]),
                runtime_seconds=float(parts[5]),
            ))
    return rows


# ---------------------------------------------------------------------------
# plain key-value config files

_CONFIG_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def parse_config_text(text: str) -> ExperimentConfig:
    """Parse ``key = value`` lines into an ExperimentConfig.

    Lists (gamma_grid, estimators) are comma-separated; blank lines and
    ``#`` comments are ignored.
    """
    kwargs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_TYPES:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        kwargs[key] = _parse_config_value(key, value)
    missing = {"n", "d", "eps", "gamma_grid"} - kwargs.keys()
    if missing:
        raise ValueError(f"config is missing keys: {sorted(missing)}")
    return ExperimentConfig(**kwargs)


def _parse_config_value(key: str, value: str):
    if key == "gamma_grid":
        return tuple(float(v) for v in value.split(",") if v.strip())
    if key == "estimators":
        return tuple(v.strip() for v in value.split(",") if v.strip())
    if key in ("sigma_kind", "predictor_dist", "pair_scheme"):
        return value
    if key == "record_runtime":
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"bad boolean for {key}: {value!r}")
    if key in ("eps", "r2", "h_fraction", "ridge_lambda"):
        return float(value)
    return int(value)


def config_to_text(cfg: ExperimentConfig) -> str:
    parts = []
    for f in fields(ExperimentConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(item) for item in v)
        parts.append(f"{f.name} = {v}")
    return "\n".join(parts) + "\n"
