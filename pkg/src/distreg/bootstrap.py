"""Bootstrap inference: parametric, pairs-cluster, nested-IV, and RDD.

Every replicate draws its random numbers from a stream derived from
``(master seed, replicate index)``, so results are bit-identical no matter
how replicates are scheduled. Failed replicates (non-convergent refits,
degenerate resamples, lost identification) are excluded from summaries but
fully accounted for, and a failure rate above a policy threshold blocks the
summary outright.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import special

from distreg.effects import (
    EffectError,
    RddSpec,
    TsriSpec,
    _treatment_probability_at_cutoff,
    frd_fit,
    srd_fit,
    tsri_fit,
)
from distreg.fit import FittedModel, fit
from distreg.functionals import FunctionalKind
from distreg.rng import STREAM_BOOTSTRAP, substream

__all__ = [
    "BootstrapError",
    "InferenceBlockedError",
    "BootstrapResult",
    "InferenceSummary",
    "parametric_bootstrap",
    "pairs_cluster_bootstrap",
    "cluster_correction",
    "ReplicateFailure",
    "parametric_replicator",
    "cluster_replicator",
    "bootstrap_table",
    "boot_variance",
    "boot_t_test",
    "percentile_ci",
    "summarize",
    "iv_bootstrap",
    "rdd_bootstrap",
    "convergence_trace",
    "TraceResult",
    "diagnose_boot",
    "BootDiagnostics",
]

DEFAULT_B = 499
MAX_FAILURE_RATE = 0.05

# sub-keys under the bootstrap stream so nested procedures never collide
_KEY_IV_FIRST = 91


class BootstrapError(RuntimeError):
    pass


class InferenceBlockedError(BootstrapError):
    """Too many failed replicates to trust a summary."""


@dataclass
class BootstrapResult:
    """Replicate statistics plus full failure accounting and seed provenance."""

    estimates: np.ndarray  # successful replicates, in replicate-index order
    n_requested: int
    failures: list[tuple[int, str]]
    seed: int
    statistic: str
    original: float
    cluster_factor: float | None = None

    @property
    def n_success(self) -> int:
        return int(self.estimates.shape[0])

    @property
    def n_failed(self) -> int:
        return len(self.failures)

    @property
    def failure_rate(self) -> float:
        return self.n_failed / self.n_requested if self.n_requested else 0.0

    def replicate_mean(self) -> float:
        return float(np.mean(self.estimates))

    def as_dict(self, include_replicates: bool = False) -> dict:
        out = {
            "statistic": self.statistic,
            "seed": self.seed,
            "n_requested": self.n_requested,
            "n_success": self.n_success,
            "n_failed": self.n_failed,
            "failures": [{"replicate": i, "reason": r} for i, r in self.failures],
            "original": self.original,
            "cluster_factor": self.cluster_factor,
        }
        if include_replicates:
            out["replicates"] = self.estimates.tolist()
        return out


@dataclass(frozen=True)
class InferenceSummary:
    statistic: str
    estimate: float  # original-sample estimate
    estimate_replicate_mean: float
    variance: float
    t: float
    p: float
    ci_lower: float
    ci_upper: float
    alpha: float
    n_success: int
    n_failed: int

    def as_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "estimate": self.estimate,
            "estimate_replicate_mean": self.estimate_replicate_mean,
            "variance": self.variance,
            "t": self.t,
            "p": self.p,
            "lower": self.ci_lower,
            "upper": self.ci_upper,
            "alpha": self.alpha,
            "n_success": self.n_success,
            "n_failed": self.n_failed,
        }


def _run_indexed(worker, B: int, workers: int):
    """Run ``worker(b)`` for b in 0..B-1, keyed by index regardless of order."""
    if workers <= 1:
        return [worker(b) for b in range(B)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(worker, range(B)))


def _collect(results, n_requested, seed, label, original,
             cluster_factor=None) -> BootstrapResult:
    estimates, failures = [], []
    for idx, value, reason in results:
        if reason is None:
            estimates.append(value)
        else:
            failures.append((idx, reason))
    return BootstrapResult(
        estimates=np.asarray(estimates, dtype=float),
        n_requested=n_requested,
        failures=failures,
        seed=seed,
        statistic=label,
        original=original,
        cluster_factor=cluster_factor,
    )


def _statistic_label(statistic, label: str | None) -> str:
    if label is not None:
        return label
    return getattr(statistic, "__name__", "statistic")


# ---------------------------------------------------------------------------
# Parametric bootstrap
# ---------------------------------------------------------------------------


def parametric_bootstrap(
    model: FittedModel,
    statistic,
    B: int = DEFAULT_B,
    seed: int = 0,
    label: str | None = None,
    workers: int = 1,
    _key_prefix: tuple[int, ...] = (),
) -> BootstrapResult:
    """Resample responses from the fitted conditional distributions and refit.

    ``statistic`` is any pure function of a refitted model. Replicate ``b``
    uses the stream derived from ``(seed, b)``; non-convergent refits are
    recorded as failures.
    """
    label = _statistic_label(statistic, label)
    original = float(statistic(model))
    family, design, control = model.family, model.design, model.control

    def worker(b: int):
        rng = substream(seed, STREAM_BOOTSTRAP, *_key_prefix, b)
        y_star = family.sample(model.fitted, rng)
        try:
            refit = fit(family, design, y_star, control)
        except Exception as err:
            return b, None, f"refit failed: {err}"
        if not refit.converged:
            return b, None, "refit did not converge"
        try:
            return b, float(statistic(refit)), None
        except Exception as err:
            return b, None, f"statistic failed: {err}"

    results = _run_indexed(worker, B, workers)
    return _collect(results, B, seed, label, original)


# ---------------------------------------------------------------------------
# Pairs cluster bootstrap
# ---------------------------------------------------------------------------


def cluster_correction(G: int, N: int, K: int) -> float:
    """Finite-sample factor G/(G-1) * (N-1)/(N-K) for cluster-robust variance."""
    if G < 2 or N <= K:
        raise BootstrapError("cluster correction needs G >= 2 and N > K")
    return (G / (G - 1.0)) * ((N - 1.0) / (N - K))


def pairs_cluster_bootstrap(
    data: pd.DataFrame,
    cluster: str,
    fit_fn,
    statistic,
    B: int = DEFAULT_B,
    seed: int = 0,
    label: str | None = None,
    workers: int = 1,
) -> BootstrapResult:
    """Resample whole clusters with replacement, refit, evaluate the statistic.

    ``fit_fn`` maps a data frame to a fitted model. The result carries the
    finite-sample cluster correction, which :func:`boot_variance` applies.
    """
    label = _statistic_label(statistic, label)
    groups = data[cluster].astype(str).to_numpy()
    ids = sorted(set(groups))
    G = len(ids)
    if G < 2:
        raise BootstrapError("need at least 2 clusters to resample")
    frames = {g: data.loc[groups == g] for g in ids}

    model0 = fit_fn(data)
    original = float(statistic(model0))
    c = cluster_correction(G, len(data), model0.n_coef)

    def worker(b: int):
        rng = substream(seed, STREAM_BOOTSTRAP, b)
        chosen = rng.integers(0, G, G)
        if np.unique(chosen).shape[0] < 2:
            return b, None, "resample drew a single unique cluster"
        sample = pd.concat([frames[ids[i]] for i in chosen], ignore_index=True)
        try:
            refit = fit_fn(sample)
        except Exception as err:
            return b, None, f"refit failed: {err}"
        if isinstance(refit, FittedModel) and not refit.converged:
            return b, None, "refit did not converge"
        try:
            return b, float(statistic(refit)), None
        except Exception as err:
            return b, None, f"statistic failed: {err}"

    results = _run_indexed(worker, B, workers)
    return _collect(results, B, seed, label, original, cluster_factor=c)


# ---------------------------------------------------------------------------
# Shared-replicate table bootstrap
# ---------------------------------------------------------------------------


class ReplicateFailure(BootstrapError):
    """A single replicate could not produce a refitted model."""


def parametric_replicator(model: FittedModel):
    """Replicator drawing responses from the fitted conditional distributions."""

    def replicate(rng: np.random.Generator) -> FittedModel:
        y_star = model.family.sample(model.fitted, rng)
        try:
            refit = fit(model.family, model.design, y_star, model.control)
        except Exception as err:
            raise ReplicateFailure(f"refit failed: {err}") from err
        if not refit.converged:
            raise ReplicateFailure("refit did not converge")
        return refit

    return replicate


def cluster_replicator(data: pd.DataFrame, cluster: str, fit_fn):
    """Replicator resampling whole clusters with replacement."""
    groups = data[cluster].astype(str).to_numpy()
    ids = sorted(set(groups))
    frames = {g: data.loc[groups == g] for g in ids}
    G = len(ids)
    if G < 2:
        raise BootstrapError("need at least 2 clusters to resample")

    def replicate(rng: np.random.Generator) -> FittedModel:
        chosen = rng.integers(0, G, G)
        if np.unique(chosen).shape[0] < 2:
            raise ReplicateFailure("resample drew a single unique cluster")
        sample = pd.concat([frames[ids[i]] for i in chosen], ignore_index=True)
        try:
            refit = fit_fn(sample)
        except Exception as err:
            raise ReplicateFailure(f"refit failed: {err}") from err
        if isinstance(refit, FittedModel) and not refit.converged:
            raise ReplicateFailure("refit did not converge")
        return refit

    return replicate


def bootstrap_table(
    replicator,
    statistics: dict,
    B: int,
    seed: int,
    original_model,
    cluster_factor: float | None = None,
    workers: int = 1,
) -> dict[str, BootstrapResult]:
    """Evaluate several statistics on one shared set of replicate refits.

    Each replicate model is fitted once and every statistic is read off it,
    exactly as one would fill a whole results table from the same B
    replicates. Statistic-level failures only fail that statistic's entry;
    replicate-level failures fail the whole row.
    """
    originals = {name: float(fn(original_model)) for name, fn in statistics.items()}

    def worker(b: int):
        rng = substream(seed, STREAM_BOOTSTRAP, b)
        try:
            model_b = replicator(rng)
        except ReplicateFailure as err:
            return b, None, str(err)
        values = {}
        for name, fn in statistics.items():
            try:
                values[name] = (float(fn(model_b)), None)
            except Exception as err:
                values[name] = (None, f"statistic failed: {err}")
        return b, values, None

    rows = _run_indexed(worker, B, workers)
    out = {}
    for name in statistics:
        collected = []
        for b, values, reason in rows:
            if reason is not None:
                collected.append((b, None, reason))
            else:
                value, stat_reason = values[name]
                collected.append((b, value, stat_reason))
        out[name] = _collect(collected, B, seed, name, originals[name],
                             cluster_factor=cluster_factor)
    return out


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------


def boot_variance(result: BootstrapResult) -> float:
    """Replicate variance, times the finite-sample factor in cluster mode."""
    if result.n_success < 2:
        raise BootstrapError("need at least 2 successful replicates for a variance")
    v = float(np.var(result.estimates, ddof=1))
    if result.cluster_factor is not None:
        v *= result.cluster_factor
    return v


def boot_t_test(result: BootstrapResult, point: float | None = None) -> tuple[float, float]:
    """t-statistic (point / bootstrap SE) and two-sided normal p-value.

    With all-identical replicates the variance is zero and the test is
    undefined; (nan, nan) is returned.
    """
    point = result.original if point is None else point
    v = boot_variance(result)
    if v <= 0.0:
        return math.nan, math.nan
    t = point / math.sqrt(v)
    p = 2.0 * (1.0 - float(special.ndtr(abs(t))))
    return t, p


def percentile_ci(result: BootstrapResult, alpha: float = 0.05) -> tuple[float, float]:
    """Empirical alpha/2 and 1-alpha/2 quantiles with type-7 interpolation."""
    if not 0.0 < alpha <= 1.0:
        raise BootstrapError("alpha must lie in (0, 1]")
    if result.n_success < 2:
        raise BootstrapError("need at least 2 successful replicates for an interval")
    if result.n_success < 2.0 / alpha:
        warnings.warn(
            f"only {result.n_success} replicates for a {1 - alpha:.0%} interval; "
            "tail quantiles will be coarse",
            UserWarning, stacklevel=2,
        )
    lo, hi = np.quantile(result.estimates, [alpha / 2.0, 1.0 - alpha / 2.0],
                         method="linear")
    return float(lo), float(hi)


def summarize(result: BootstrapResult, alpha: float = 0.05,
              max_failure_rate: float = MAX_FAILURE_RATE) -> InferenceSummary:
    """Point estimates, bootstrap variance, t-test, and percentile interval.

    Raises :class:`InferenceBlockedError` when the failure rate exceeds
    ``max_failure_rate``.
    """
    if result.failure_rate > max_failure_rate:
        raise InferenceBlockedError(
            f"{result.n_failed}/{result.n_requested} replicates failed "
            f"({result.failure_rate:.1%} > {max_failure_rate:.0%} policy)"
        )
    t, p = boot_t_test(result)
    lo, hi = percentile_ci(result, alpha)
    return InferenceSummary(
        statistic=result.statistic,
        estimate=result.original,
        estimate_replicate_mean=result.replicate_mean(),
        variance=boot_variance(result),
        t=t,
        p=p,
        ci_lower=lo,
        ci_upper=hi,
        alpha=alpha,
        n_success=result.n_success,
        n_failed=result.n_failed,
    )


# ---------------------------------------------------------------------------
# Nested IV bootstrap
# ---------------------------------------------------------------------------


def iv_bootstrap(
    data: pd.DataFrame,
    spec: TsriSpec,
    statistic,
    n_first: int,
    n_second: int,
    seed: int = 0,
    first_stage_method: str = "parametric",
    freeze_first_stage: bool = False,
    label: str | None = None,
    workers: int = 1,
) -> BootstrapResult:
    """Two-level bootstrap that propagates first-stage uncertainty.

    The outer loop re-estimates the first stage on a bootstrap draw and
    recomputes the residuals on the original rows; the inner loop runs a
    parametric bootstrap of the second stage around each recomputed residual
    set, pooling ``n_first * n_second`` replicates. With the first stage
    frozen at the original estimates and ``n_first=1`` this reduces exactly
    to the plain parametric bootstrap of the second stage.
    """
    if first_stage_method not in ("parametric", "pairs"):
        raise BootstrapError("first_stage_method must be 'parametric' or 'pairs'")
    base = tsri_fit(data, spec)
    label = _statistic_label(statistic, label)
    original = float(statistic(base.model))

    if freeze_first_stage and n_first == 1:
        inner = parametric_bootstrap(base.model, statistic, n_second, seed,
                                     label=label, workers=workers)
        return _collect(
            [(i, v, None) for i, v in enumerate(inner.estimates)]
            + [(i, None, r) for i, r in inner.failures],
            n_second, seed, label, original,
        )

    n = len(data)
    all_results: list[tuple[int, float | None, str | None]] = []
    for k in range(n_first):
        rng = substream(seed, STREAM_BOOTSTRAP, _KEY_IV_FIRST, k)
        frame_k = data.copy()
        try:
            for var in spec.endogenous:
                stage1 = base.first_stage_models[var]
                if first_stage_method == "parametric":
                    x_star = stage1.family.sample(stage1.fitted, rng)
                    redraw = data.copy()
                    redraw[var] = x_star
                else:
                    idx = rng.integers(0, n, n)
                    redraw = data.iloc[idx].reset_index(drop=True)
                refit1 = _refit_first_stage(spec, redraw, var)
                h_k = refit1.predict_parameters(data)["mu"]
                xi = np.asarray(data[var], dtype=float) - h_k
                scale = float(np.std(xi)) if spec.standardize_residuals else 1.0
                frame_k[spec.residual_column(var)] = xi / (scale if scale > 0 else 1.0)
            stage2_k = _refit_second_stage(spec, frame_k)
        except Exception as err:
            for d in range(n_second):
                all_results.append((k * n_second + d, None, f"first stage failed: {err}"))
            continue
        inner = parametric_bootstrap(stage2_k, statistic, n_second, seed,
                                     label=label, workers=workers, _key_prefix=(k,))
        got = {i: v for i, v in zip(_success_indices(inner), inner.estimates)}
        fail = dict(inner.failures)
        for d in range(n_second):
            if d in fail:
                all_results.append((k * n_second + d, None, fail[d]))
            else:
                all_results.append((k * n_second + d, got[d], None))

    return _collect(all_results, n_first * n_second, seed, label, original)


def _success_indices(result: BootstrapResult) -> list[int]:
    failed = {i for i, _ in result.failures}
    return [i for i in range(result.n_requested) if i not in failed]


def _refit_first_stage(spec: TsriSpec, frame: pd.DataFrame, var: str) -> FittedModel:
    from distreg.effects import _fit_formulas
    from distreg.families import get_family

    target = np.asarray(frame[var], dtype=float)
    staged = frame.assign(**{"__stage1_y": target})
    return _fit_formulas(get_family("normal"),
                         {"mu": spec.first_stage_formula(var), "sigma": "1"},
                         staged, "__stage1_y")


def _refit_second_stage(spec: TsriSpec, frame: pd.DataFrame) -> FittedModel:
    from distreg.effects import _fit_formulas
    from distreg.families import get_family

    family = get_family(spec.family) if isinstance(spec.family, str) else spec.family
    formulas = {}
    for param in family.param_names:
        base = spec.formulas.get(param, "1")
        extra = []
        for var in spec.endogenous:
            col = spec.residual_column(var)
            if spec.residual_terms == "spline":
                extra.append(f"s({col}, k={spec.spline_knots})")
            else:
                extra.append(col)
        formulas[param] = " + ".join([base] + extra)
    return _fit_formulas(family, formulas, frame, spec.response)


# ---------------------------------------------------------------------------
# RDD bootstrap
# ---------------------------------------------------------------------------


def rdd_bootstrap(
    data: pd.DataFrame,
    spec: RddSpec,
    functional: FunctionalKind,
    B: int = DEFAULT_B,
    seed: int = 0,
    label: str | None = None,
    workers: int = 1,
) -> BootstrapResult:
    """Parametric resampling from both side models; pairs for fuzzy denominators.

    Each replicate redraws responses from the fitted left/right conditional
    distributions and re-runs the full estimator, including re-estimation of
    the treatment-probability models in fuzzy designs, so their uncertainty
    enters the interval.
    """
    label = label or f"rdd_{functional.label}"
    base = frd_fit(data, spec, functional) if spec.fuzzy else srd_fit(data, spec, functional)
    original = float(base.estimate.difference)

    x = np.asarray(data[spec.forcing], dtype=float)
    window = data if spec.bandwidth is None else data.loc[np.abs(x - spec.cutoff) <= spec.bandwidth]
    wx = np.asarray(window[spec.forcing], dtype=float)
    left_mask = wx < spec.cutoff
    left = window.loc[left_mask]
    right = window.loc[~left_mask]

    def worker(b: int):
        rng = substream(seed, STREAM_BOOTSTRAP, b)
        frame = window.copy()
        y_new = np.empty(len(window))
        y_new[left_mask] = base.left_model.family.sample(base.left_model.fitted, rng)
        y_new[~left_mask] = base.right_model.family.sample(base.right_model.fitted, rng)
        frame[spec.response] = y_new
        try:
            replicate = srd_fit(frame, spec, functional)
            if spec.fuzzy:
                den_left = left.iloc[rng.integers(0, len(left), len(left))]
                den_right = right.iloc[rng.integers(0, len(right), len(right))]
                from distreg.design import build_formula_set
                from distreg.effects import _cutoff_profile
                from distreg.families import get_family as _gf

                fam = _gf(spec.family) if isinstance(spec.family, str) else spec.family
                fs = build_formula_set(spec.side_formulas(fam), fam.param_names)
                profile = _cutoff_profile(window, spec, fs.variables())
                row = profile.row()
                p_l = _treatment_probability_at_cutoff(den_left, spec, row)
                p_r = _treatment_probability_at_cutoff(den_right, spec, row)
                denom = p_r - p_l
                if abs(denom) < spec.min_compliance:
                    return b, None, "compliance jump below threshold"
                return b, float(replicate.estimate.difference / denom), None
            return b, float(replicate.estimate.difference), None
        except EffectError as err:
            return b, None, str(err)
        except Exception as err:
            return b, None, f"replicate failed: {err}"

    results = _run_indexed(worker, B, workers)
    return _collect(results, B, seed, label, original)


# ---------------------------------------------------------------------------
# Replicate diagnostics
# ---------------------------------------------------------------------------


@dataclass
class TraceResult:
    b_values: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    stable: bool


def convergence_trace(result: BootstrapResult, alpha: float = 0.05,
                      min_prefix: int = 10) -> TraceResult:
    """Percentile bounds over replicate prefixes, with a stability flag.

    The flag is set when, over the last 20% of prefixes, neither bound moves
    by more than 5% of the final interval width.
    """
    est = result.estimates
    B = est.shape[0]
    start = min(min_prefix, B)
    b_values = np.arange(start, B + 1)
    lower = np.empty(b_values.shape[0])
    upper = np.empty(b_values.shape[0])
    for j, b in enumerate(b_values):
        lower[j], upper[j] = np.quantile(est[:b], [alpha / 2.0, 1.0 - alpha / 2.0],
                                         method="linear")
    width = upper[-1] - lower[-1]
    tail = max(1, int(0.2 * b_values.shape[0]))
    lo_move = float(np.ptp(lower[-tail:]))
    hi_move = float(np.ptp(upper[-tail:]))
    threshold = 0.05 * width if width > 0 else 0.0
    stable = bool(lo_move <= threshold and hi_move <= threshold)
    return TraceResult(b_values=b_values, lower=lower, upper=upper, stable=stable)


@dataclass
class BootDiagnostics:
    q1: float
    median: float
    q3: float
    iqr: float
    fence_low: float
    fence_high: float
    outlier_count: int
    outlier_share: float
    skewness: float
    warn: bool

    def as_dict(self) -> dict:
        return {
            "q1": self.q1,
            "median": self.median,
            "q3": self.q3,
            "iqr": self.iqr,
            "fence_low": self.fence_low,
            "fence_high": self.fence_high,
            "outlier_count": self.outlier_count,
            "outlier_share": self.outlier_share,
            "skewness": self.skewness,
            "warn": self.warn,
        }


def diagnose_boot(result: BootstrapResult,
                  outlier_warn_share: float = 0.05) -> BootDiagnostics:
    """Boxplot statistics and skewness of the replicate distribution."""
    est = result.estimates
    q1, med, q3 = np.quantile(est, [0.25, 0.5, 0.75], method="linear")
    iqr = q3 - q1
    lo, hi = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    outliers = int(np.sum((est < lo) | (est > hi)))
    share = outliers / est.shape[0] if est.shape[0] else 0.0
    centered = est - est.mean()
    m2 = float(np.mean(centered**2))
    skew = float(np.mean(centered**3) / m2**1.5) if m2 > 0 else 0.0
    return BootDiagnostics(
        q1=float(q1),
        median=float(med),
        q3=float(q3),
        iqr=float(iqr),
        fence_low=float(lo),
        fence_high=float(hi),
        outlier_count=outliers,
        outlier_share=share,
        skewness=skew,
        warn=share > outlier_warn_share,
    )
