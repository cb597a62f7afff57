"""Pairwise-difference datasets: full half-set and k-permutation construction.

Row ``r`` of a PairSet holds ``case[second[r]] - case[first[r]]``. Only one of
each +/- difference is stored; the estimators applied downstream are invariant
under sign augmentation, so the half set carries the same information at half
the memory.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil

import numpy as np

from .numeric_core import MaskedMatrix, as_seed_sequence


@dataclass(frozen=True)
class PairSet:
    """Symmetrized differences with back-references to the originating cases."""

    x: np.ndarray                 # (n_pairs, d) differences
    x_mask: np.ndarray            # (n_pairs, d) True where both cells observed
    first: np.ndarray             # (n_pairs,) case index i
    second: np.ndarray            # (n_pairs,) case index l, row = case_l - case_i
    n_cases: int
    scheme: str                   # "full" | "kperm"
    y: np.ndarray | None = None   # (n_pairs,) response differences
    y_mask: np.ndarray | None = None
    k: int | None = None
    seed: int | None = None

    @property
    def n_pairs(self) -> int:
        return self.x.shape[0]

    @property
    def n_cols(self) -> int:
        return self.x.shape[1]

    def as_masked(self) -> MaskedMatrix:
        return MaskedMatrix(values=self.x, mask=self.x_mask)


def diff_with_mask(a_vals, a_mask, b_vals, b_mask):
    """Difference b - a where both sides are observed; missing elsewhere."""
    both = np.asarray(a_mask, bool) & np.asarray(b_mask, bool)
    vals = np.where(both, np.asarray(b_vals, float) - np.asarray(a_vals, float), np.nan)
    return vals, both


def _coerce(X, y):
    if isinstance(X, MaskedMatrix):
        xv, xm = X.values, X.mask
    else:
        xv = np.asarray(X, dtype=float)
        xm = np.isfinite(xv)
    if xv.ndim != 2:
        raise ValueError("expected a 2-d case matrix")
    if y is not None:
        y = np.asarray(y, dtype=float)
        if y.shape != (xv.shape[0],):
            raise ValueError("response length must match the number of cases")
    return xv, xm, y


def full_pairs(X, y=None) -> PairSet:
    """All n(n-1)/2 differences case_l - case_i over index pairs i < l."""
    xv, xm, y = _coerce(X, y)
    n = xv.shape[0]
    if n < 2:
        raise ValueError("need at least two cases to form pairs")
    first, second = np.triu_indices(n, k=1)
    vals, mask = diff_with_mask(xv[first], xm[first], xv[second], xm[second])
    yv = ym = None
    if y is not None:
        ym_cases = np.isfinite(y)
        yv, ym = diff_with_mask(y[first], ym_cases[first], y[second], ym_cases[second])
    return PairSet(
        x=vals, x_mask=mask, first=first, second=second,
        n_cases=n, scheme="full", y=yv, y_mask=ym,
    )


def kperm_pairs(X, k: int, seed, y=None) -> PairSet:
    """n*k differences from k random cyclic permutations.

    Each permutation pi contributes the n consecutive differences
    case[pi[i+1]] - case[pi[i]] (cyclically), so every case occurs in exactly
    2k pairs counting both roles. Permutations are drawn from independent
    seed-derived streams; the output is identical however the loop is split.
    """
    xv, xm, y = _coerce(X, y)
    n = xv.shape[0]
    if n < 2:
        raise ValueError("need at least two cases to form pairs")
    if k < 1:
        raise ValueError("k must be at least 1")
    children = np.random.SeedSequence(seed).spawn(k)
    firsts, seconds = [], []
    for child in children:
        perm = np.random.default_rng(child).permutation(n)
        firsts.append(perm)
        seconds.append(np.roll(perm, -1))
    first = np.concatenate(firsts)
    second = np.concatenate(seconds)
    vals, mask = diff_with_mask(xv[first], xm[first], xv[second], xm[second])
    yv = ym = None
    if y is not None:
        ym_cases = np.isfinite(y)
        yv, ym = diff_with_mask(y[first], ym_cases[first], y[second], ym_cases[second])
    return PairSet(
        x=vals, x_mask=mask, first=first, second=second,
        n_cases=n, scheme="kperm", y=yv, y_mask=ym, k=int(k), seed=seed,
    )


def make_pairs(X, scheme: str, k: int, seed, y=None) -> PairSet:
    if scheme == "full":
        return full_pairs(X, y=y)
    if scheme == "kperm":
        return kperm_pairs(X, k=k, seed=seed, y=y)
    raise ValueError(f"unknown pair scheme {scheme!r}")


def pair_subset_size(h: int, n: int, n_pairs: int) -> int:
    """Trimming subset size on the pair scale.

    Keeps the fraction h(h-1) / (n(n-1)) of the pair set, which is the share
    of pairs whose two endpoints both lie in an h-subset of the cases. For the
    full half set this is exactly h(h-1)/2.
    """
    if not 2 <= h <= n:
        raise ValueError(f"h={h} out of range for n={n}")
    return ceil((h / n) * ((h - 1) / (n - 1)) * n_pairs)
