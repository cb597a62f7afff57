"""celllts: linear regression robust to cellwise outliers, casewise
outliers, and missing values, with robust out-of-sample prediction."""

from .numeric_core import (
    DegenerateDataError,
    MaskedMatrix,
    UniMcdResult,
    marginal_cutoff,
    marginal_flag,
    robust_zscores,
    unimcd,
    unimcd_consistency,
)
from .symmetrize import PairSet, full_pairs, kperm_pairs, make_pairs, pair_subset_size
from .cellmcd import (
    CellMcdModel,
    CellPenalty,
    fit_cellmcd,
    flag_row,
    impute_row,
    objective,
    update_mu_sigma,
    update_w,
)
from .lts_ridge import LtsFit, augment_ridge, cstep, fit_lts_ridge, reweighted_fit
from .pipeline import (
    CellLtsModel,
    CellLtsOptions,
    CellResiduals,
    Prediction,
    StandardizationRecord,
    breakdown_limit_ratio,
    breakdown_mstar,
    cell_residuals,
    fit_celllts,
    predict,
)
from .cellmap import render_cellmap
from .cli_io import (
    deserialize_model,
    emit_curves,
    load_model,
    parse_csv,
    serialize_model,
    write_csv,
)

__version__ = "0.1.0"

__all__ = [
    "CellLtsModel", "CellLtsOptions", "CellMcdModel", "CellPenalty",
    "CellResiduals", "DegenerateDataError", "LtsFit", "MaskedMatrix",
    "PairSet", "Prediction", "StandardizationRecord", "UniMcdResult",
    "augment_ridge", "breakdown_limit_ratio", "breakdown_mstar",
    "cell_residuals", "cstep", "deserialize_model", "emit_curves",
    "fit_celllts", "fit_cellmcd", "fit_lts_ridge", "flag_row", "full_pairs",
    "impute_row", "kperm_pairs", "load_model", "make_pairs",
    "marginal_cutoff", "marginal_flag", "objective", "pair_subset_size",
    "parse_csv", "predict", "render_cellmap", "reweighted_fit",
    "robust_zscores", "serialize_model", "unimcd", "unimcd_consistency",
    "update_mu_sigma", "update_w", "write_csv",
]
