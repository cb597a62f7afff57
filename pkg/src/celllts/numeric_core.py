"""Masked matrices and univariate robust location/scale estimation.

The univariate estimator used throughout is the exact univariate MCD: among
all contiguous windows of the sorted sample, the one with the smallest
variance. Its scale is multiplied by the usual Gaussian consistency factor so
that chi-square flagging thresholds apply directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2


class DegenerateDataError(ValueError):
    """Data cannot support the requested estimate (e.g. a constant column)."""


def as_seed_sequence(seed) -> np.random.SeedSequence:
    """Accept an int, None, or an existing SeedSequence."""
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def marginal_cutoff(p: float = 0.99) -> float:
    """Cutoff sqrt(chi2_{1,p}) for marginal z-score flagging (~2.5758 at 0.99)."""
    return float(np.sqrt(chi2.ppf(p, df=1)))


def unimcd_consistency(alpha: float) -> float:
    """Gaussian consistency factor for the univariate MCD standard deviation.

    ``alpha`` is the subset fraction h/m. The raw window standard deviation
    underestimates sigma for a Gaussian sample; dividing the truncated second
    moment out gives c(alpha) = sqrt(alpha / F_chi2_3(chi2_{1,alpha})), which
    equals 1 at alpha = 1.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"subset fraction must be in (0, 1], got {alpha}")
    if alpha == 1.0:
        return 1.0
    q = chi2.ppf(alpha, df=1)
    return float(np.sqrt(alpha / chi2.cdf(q, df=3)))


@dataclass(frozen=True)
class UniMcdResult:
    """Location/scale of the minimum-variance window of a sorted sample."""

    location: float
    raw_scale: float
    scale: float
    subset_start: int


def unimcd(v, h_sub: int) -> UniMcdResult:
    """Exact univariate MCD of a vector.

    Parameters
    ----------
    v : array-like of shape (m,)
        Sample without missing entries.
    h_sub : int
        Window size, 1 <= h_sub <= m. The optimal window is the contiguous
        stretch of the sorted sample with minimal sample variance; ties go to
        the smallest start index.

    Returns
    -------
    UniMcdResult
        location = window mean, raw_scale = window standard deviation
        (ddof=1), scale = raw_scale times the consistency factor for
        alpha = h_sub/m.
    """
    v = np.asarray(v, dtype=float)
    if v.ndim != 1:
        raise ValueError("unimcd expects a 1-d vector")
    m = v.size
    if m == 0:
        raise ValueError("unimcd: empty input")
    if np.isnan(v).any():
        raise ValueError("unimcd: input contains missing values")
    if not 1 <= h_sub <= m:
        raise ValueError(f"unimcd: subset size {h_sub} out of range for m={m}")

    s = np.sort(v)
    h = int(h_sub)
    csum = np.concatenate(([0.0], np.cumsum(s)))
    csq = np.concatenate(([0.0], np.cumsum(s * s)))
    wsum = csum[h:] - csum[:-h]
    # h * sample variance * (h-1)/h, i.e. the centered sum of squares per window
    ss = (csq[h:] - csq[:-h]) - wsum * wsum / h

    # The prefix-sum identity cancels catastrophically when the data contains
    # entries orders of magnitude above the clean spread (squares ~ max^2
    # dominate every prefix). Detect that and recompute window sums of squares
    # directly; O(m*h), only hit on wildly contaminated inputs.
    hazard = 64.0 * m * np.finfo(float).eps * float(np.max(s * s, initial=0.0))
    if np.min(ss) <= hazard and h >= 2:
        windows = np.lib.stride_tricks.sliding_window_view(s, h)
        ss = ((windows - windows.mean(axis=1, keepdims=True)) ** 2).sum(axis=1)

    start = int(np.argmin(ss))
    window = s[start : start + h]
    location = float(window.mean())
    raw = float(np.sqrt(((window - location) ** 2).sum() / (h - 1))) if h >= 2 else 0.0
    scale = raw * unimcd_consistency(h / m)
    return UniMcdResult(location=location, raw_scale=raw, scale=scale, subset_start=start)


@dataclass(frozen=True)
class MaskedMatrix:
    """Numeric matrix with an observation mask.

    ``mask`` is True where the cell is observed. Payloads of unobserved cells
    are normalized to NaN on construction so they can never leak into a
    computation unnoticed.
    """

    values: np.ndarray
    mask: np.ndarray
    column_names: tuple[str, ...] | None = None

    def __post_init__(self):
        values = np.ascontiguousarray(np.asarray(self.values, dtype=float))
        mask = np.ascontiguousarray(np.asarray(self.mask, dtype=bool))
        if values.ndim != 2:
            raise ValueError("MaskedMatrix values must be 2-d")
        if values.shape != mask.shape:
            raise ValueError(
                f"values shape {values.shape} != mask shape {mask.shape}"
            )
        values = np.where(mask, values, np.nan)
        if self.column_names is not None:
            names = tuple(self.column_names)
            if len(names) != values.shape[1]:
                raise ValueError("column_names length mismatch")
            object.__setattr__(self, "column_names", names)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def from_values(cls, values, column_names=None) -> "MaskedMatrix":
        """Build from a plain array, treating NaN entries as missing."""
        values = np.asarray(values, dtype=float)
        return cls(values=values, mask=np.isfinite(values), column_names=column_names)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    def observed_column(self, j: int) -> np.ndarray:
        """Observed entries of column j, in row order."""
        return self.values[self.mask[:, j], j]


def column_unimcd(X: MaskedMatrix, h_sub: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-column univariate MCD locations and consistent scales.

    Missing cells are removed per column and the window size is clamped to the
    observed count. Raises on columns with no observed cells or zero scale.
    """
    locs = np.empty(X.n_cols)
    scales = np.empty(X.n_cols)
    for j in range(X.n_cols):
        col = X.observed_column(j)
        if col.size == 0:
            raise DegenerateDataError(f"column {_colname(X, j)} has no observed cells")
        res = unimcd(col, min(h_sub, col.size))
        if res.scale <= 0.0:
            raise DegenerateDataError(
                f"column {_colname(X, j)} is constant on its robust subset"
            )
        locs[j] = res.location
        scales[j] = res.scale
    return locs, scales


def _colname(X: MaskedMatrix, j: int) -> str:
    return X.column_names[j] if X.column_names is not None else str(j)


def robust_zscores(X: MaskedMatrix, centers, scales) -> np.ndarray:
    """Per-cell z-scores (x_ij - center_j) / scale_j; missing cells yield NaN."""
    centers = np.asarray(centers, dtype=float)
    scales = np.asarray(scales, dtype=float)
    if centers.shape != (X.n_cols,) or scales.shape != (X.n_cols,):
        raise ValueError("centers/scales must have one entry per column")
    if np.any(scales <= 0.0):
        bad = int(np.argmax(scales <= 0.0))
        raise ValueError(f"nonpositive scale for column {_colname(X, bad)}")
    z = (X.values - centers) / scales
    z[~X.mask] = np.nan
    return z


def marginal_flag(z: np.ndarray, cutoff: float | None = None) -> np.ndarray:
    """Initial cell weights from marginal z-scores.

    Returns a 0/1 matrix with 0 wherever |z| exceeds the cutoff or the cell is
    missing (NaN). Default cutoff is sqrt(chi2_{1,0.99}).
    """
    if cutoff is None:
        cutoff = marginal_cutoff()
    if cutoff <= 0.0:
        raise ValueError("cutoff must be positive")
    z = np.asarray(z, dtype=float)
    keep = np.abs(z) <= cutoff
    keep &= ~np.isnan(z)
    return keep.astype(np.int8)
