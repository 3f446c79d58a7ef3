"""Distributional regression for treatment-effect analysis beyond the mean."""

from distreg.bootstrap import (
    BootstrapResult,
    InferenceSummary,
    iv_bootstrap,
    pairs_cluster_bootstrap,
    parametric_bootstrap,
    percentile_ci,
    rdd_bootstrap,
    summarize,
)
from distreg.design import FormulaSet, assemble_design, build_formula_set, parse_formula
from distreg.diagnostics import quantile_residuals, residual_summary
from distreg.effects import (
    CovariateProfile,
    EffectEstimate,
    RddSpec,
    TsriSpec,
    covariate_profile,
    frd_fit,
    mte,
    panel_fit,
    srd_fit,
    tsri_fit,
)
from distreg.families import FAMILIES, LINKS, get_family
from distreg.fit import FitControl, FittedModel, fit, gaic, select_smoothing
from distreg.functionals import (
    DistSpec,
    FunctionalKind,
    atkinson,
    dist_mean,
    dist_variance,
    fgls_vulnerability,
    gini,
    theil,
    vulnerability,
)

__version__ = "0.1.0"
