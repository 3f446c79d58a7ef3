"""Command-line entry point.

Subcommands: fit, diagnose, effects, bootstrap, iv, rdd, panel, simulate.
Every run reads one TOML config, writes ``report.json`` plus SVG artifacts
under the configured output directory, and exits 0 on success, 2 on config
errors, 3 on data errors, 4 on estimation failures, 5 when inference is
blocked by the failed-replicate policy.
"""

from __future__ import annotations

import argparse
import math
import sys

import numpy as np

from distreg import bootstrap as bt
from distreg.cli import svg
from distreg.cli.config import AnalysisConfig, ConfigError, config_hash, load_config
from distreg.cli.data import DataError, drop_missing, ingest
from distreg.cli.report import new_report, write_report
from distreg.cli.simulate import write_simulation
from distreg.design import DesignError, assemble_design, build_formula_set
from distreg.diagnostics import (
    DiagnosticsError,
    cluster_heterogeneity_check,
    qq_data,
    quantile_residuals,
    residual_summary,
)
from distreg.effects import (
    EffectError,
    RddSpec,
    TsriSpec,
    covariate_profile,
    mte,
    panel_fit,
    srd_fit,
    frd_fit,
    tsri_fit,
)
from distreg.families import DomainError, get_family
from distreg.fit import FitError, fit
from distreg.functionals import FunctionalError, FunctionalKind, MomentError
from distreg.rng import STREAM_DIAGNOSTICS, substream

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_ESTIMATION = 4
EXIT_BLOCKED = 5


def _prepare_data(config: AnalysisConfig):
    result = ingest(config.data_path, config.schema, config.filters)
    fam = get_family(config.family_name)
    fs = build_formula_set(config.formulas, fam.param_names,
                           config.categorical_columns())
    used = sorted(fs.variables() | {config.response})
    frame, n_missing = drop_missing(result.data, used)
    result.data = frame
    result.missing_drops = n_missing
    return result, fam, fs


def _fit_model(config: AnalysisConfig, frame, fam, fs):
    design = assemble_design(fs, frame, categorical=config.categorical_columns())
    y = np.asarray(frame[config.response], dtype=float)
    grid = config.section("model").get("lambda_grid")
    if grid:
        from distreg.fit import select_smoothing

        _, model = select_smoothing(fam, design, y, [float(g) for g in grid])
        return model
    return fit(fam, design, y)


def _model_summary(model) -> dict:
    return {
        "family": model.family.name,
        "n": model.n_obs,
        "n_coefficients": model.n_coef,
        "loglik": model.loglik,
        "deviance": model.deviance,
        "edf_total": model.edf_total,
        "converged": model.converged,
        "cycles": model.n_cycles,
        "coefficients": model.coefficients_named(),
        "edf": model.edf,
    }


def _residual_block(config, model, out_dir, seed, write_plot=True) -> dict:
    rng = substream(seed, STREAM_DIAGNOSTICS)
    resid = quantile_residuals(model, rng=rng)
    summary = residual_summary(resid)
    block = {"summary": summary.as_dict(), "n": int(resid.shape[0])}
    if write_plot:
        theo, sample = qq_data(resid)
        svg.scatter_chart(theo, sample, out_dir / "qq.svg",
                          title="Quantile residuals vs. normal quantiles",
                          xlabel="theoretical", ylabel="sample", identity_line=True)
        block["qq_plot"] = "qq.svg"
    return block, resid


def _resolve_functionals(config: AnalysisConfig, frame) -> list[FunctionalKind]:
    out = []
    for ident in config.functional_ids:
        if ident == "vulnerability:auto60":
            # poverty line: 60% of the median outcome among control rows
            treatment = config.treatment
            data = frame if treatment is None else frame.loc[frame[treatment] == 0.0]
            if len(data) == 0:
                data = frame
            z = 0.6 * float(np.median(np.asarray(data[config.response], dtype=float)))
            out.append(FunctionalKind("vulnerability", z, alias=ident))
        else:
            out.append(FunctionalKind.parse(ident))
    return out


def _effects_profile(config: AnalysisConfig, frame, fs):
    used = sorted(fs.variables())
    return covariate_profile(frame, categorical=config.categorical_columns(),
                             overrides=config.profile_overrides, columns=used)


def _mte_statistic(profile, fk, treatment):
    def statistic(model):
        return mte(model, profile, fk, treatment).difference

    statistic.__name__ = f"mte_{fk.label}"
    return statistic


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_fit(config: AnalysisConfig) -> dict:
    result, fam, fs = _prepare_data(config)
    model = _fit_model(config, result.data, fam, fs)
    out = config.output_dir
    seed = config.seed()
    doc = new_report("fit", config_hash(config), config.raw, seed, result.accounting())
    doc["fit"] = _model_summary(model)
    resid_block, _ = _residual_block(config, model, out, seed)
    doc["residuals"] = resid_block
    (out / "model.json").parent.mkdir(parents=True, exist_ok=True)
    (out / "model.json").write_text(model.to_json() + "\n")
    doc["artifacts"] = ["model.json", "qq.svg"]
    return doc


def cmd_diagnose(config: AnalysisConfig) -> dict:
    result, fam, fs = _prepare_data(config)
    model = _fit_model(config, result.data, fam, fs)
    out = config.output_dir
    seed = config.seed()
    doc = new_report("diagnose", config_hash(config), config.raw, seed,
                     result.accounting())
    doc["fit"] = _model_summary(model)
    resid_block, resid = _residual_block(config, model, out, seed)
    doc["residuals"] = resid_block
    cluster = config.section("diagnostics", required=False).get(
        "cluster", config.bootstrap.get("cluster")
    )
    if cluster:
        adj_r2, p = cluster_heterogeneity_check(resid, result.data[cluster])
        doc["cluster_check"] = {"column": cluster, "adjusted_r2": adj_r2, "p_value": p}
    doc["artifacts"] = ["qq.svg"]
    return doc


def _effect_table(config, model, profile, functionals, treatment):
    rows = []
    for fk in functionals:
        est = mte(model, profile, fk, treatment)
        row = est.as_dict()
        if fk.alias is not None:
            row["resolved_argument"] = fk.arg
        rows.append(row)
    return rows


def cmd_effects(config: AnalysisConfig) -> dict:
    result, fam, fs = _prepare_data(config)
    treatment = config.treatment
    if not treatment:
        raise ConfigError("[model] needs a 'treatment' column for effects")
    model = _fit_model(config, result.data, fam, fs)
    profile = _effects_profile(config, result.data, fs)
    functionals = _resolve_functionals(config, result.data)
    if not functionals:
        raise ConfigError("[functionals].list is empty")
    out = config.output_dir
    doc = new_report("effects", config_hash(config), config.raw, config.seed(),
                     result.accounting())
    doc["fit"] = _model_summary(model)
    doc["profile"] = {"values": profile.values, "provenance": profile.provenance}
    doc["effects"] = {
        "treatment": treatment,
        "n": model.n_obs,
        "table": _effect_table(config, model, profile, functionals, treatment),
    }

    theta_arms = {
        label: model.predict_theta(profile.row(**{treatment: t}))
        for label, t in (("control", 0.0), ("treated", 1.0))
    }
    fam_obj = model.family
    grid_lo = min(float(np.atleast_1d(fam_obj.quantile(0.001, th))[0])
                  for th in theta_arms.values())
    grid_hi = max(float(np.atleast_1d(fam_obj.quantile(0.995, th))[0])
                  for th in theta_arms.values())
    if fam_obj.support == "count":
        grid = np.arange(math.floor(grid_lo), math.ceil(grid_hi) + 1, dtype=float)
    else:
        grid = np.linspace(grid_lo, grid_hi, 240)
    series = {}
    for label, th in theta_arms.items():
        dens = np.asarray(fam_obj.pdf(grid, tuple(float(t[0]) for t in th)), dtype=float)
        series[label] = (grid, dens)
    svg.line_chart(series, out / "density.svg",
                   title="Conditional outcome distributions at the profile",
                   xlabel=config.response, ylabel="density")
    doc["artifacts"] = ["density.svg"]
    return doc


def cmd_bootstrap(config: AnalysisConfig) -> dict:
    result, fam, fs = _prepare_data(config)
    treatment = config.treatment
    if not treatment:
        raise ConfigError("[model] needs a 'treatment' column for effect bootstraps")
    boot = config.bootstrap
    if not boot:
        raise ConfigError("[bootstrap] section is required for this subcommand")
    functionals = _resolve_functionals(config, result.data)
    if not functionals:
        raise ConfigError("[functionals].list is empty")

    model = _fit_model(config, result.data, fam, fs)
    profile = _effects_profile(config, result.data, fs)
    statistics = {fk.label: _mte_statistic(profile, fk, treatment) for fk in functionals}

    B = int(boot["replicates"])
    seed = int(boot["seed"])
    workers = int(boot["workers"])
    alpha = float(boot["alpha"])
    if boot["method"] == "pairs-cluster":
        fit_fn = lambda frame: _fit_model(config, frame, fam, fs)
        replicator = bt.cluster_replicator(result.data, boot["cluster"], fit_fn)
        groups = result.data[boot["cluster"]].astype(str)
        c = bt.cluster_correction(groups.nunique(), len(result.data), model.n_coef)
        results = bt.bootstrap_table(replicator, statistics, B, seed, model,
                                     cluster_factor=c, workers=workers)
    else:
        replicator = bt.parametric_replicator(model)
        results = bt.bootstrap_table(replicator, statistics, B, seed, model,
                                     workers=workers)

    out = config.output_dir
    doc = new_report("bootstrap", config_hash(config), config.raw, seed,
                     result.accounting())
    doc["fit"] = _model_summary(model)
    doc["profile"] = {"values": profile.values, "provenance": profile.provenance}
    table = []
    diagnostics = {}
    artifacts = []
    include_reps = bool(boot.get("keep_replicates", False))
    for fk in functionals:
        res = results[fk.label]
        summary = bt.summarize(res, alpha=alpha,
                               max_failure_rate=float(boot["max_failure_rate"]))
        row = summary.as_dict()
        row["functional"] = fk.label
        table.append(row)
        diag = bt.diagnose_boot(res)
        trace = bt.convergence_trace(res, alpha=alpha)
        tag = fk.label.replace(":", "_")
        svg.line_chart(
            {"lower": (trace.b_values, trace.lower),
             "upper": (trace.b_values, trace.upper)},
            out / f"trace_{tag}.svg",
            title=f"Percentile bounds vs. replicates ({fk.label})",
            xlabel="replicates", ylabel="bound",
        )
        svg.histogram(res.estimates, out / f"boot_{tag}_hist.svg",
                      title=f"Bootstrap estimates ({fk.label})", xlabel="estimate")
        svg.boxplot(diag.as_dict(), res.estimates, out / f"boot_{tag}_box.svg",
                    title=f"Bootstrap estimates ({fk.label})")
        artifacts += [f"trace_{tag}.svg", f"boot_{tag}_hist.svg", f"boot_{tag}_box.svg"]
        diagnostics[fk.label] = {
            "boxplot": diag.as_dict(),
            "stable_trace": trace.stable,
            "result": res.as_dict(include_replicates=include_reps),
        }
    doc["effects"] = {
        "treatment": treatment,
        "n": model.n_obs,
        "B": B,
        "method": boot["method"],
        "table": table,
    }
    doc["bootstrap_diagnostics"] = diagnostics
    doc["artifacts"] = artifacts
    return doc


def cmd_iv(config: AnalysisConfig) -> dict:
    result, fam, fs = _prepare_data(config)
    iv_sec = config.section("iv")
    endog = iv_sec.get("endogenous")
    if not endog:
        raise ConfigError("[iv.endogenous] must map endogenous columns to instruments")
    spec = TsriSpec(
        endogenous={str(k): [str(w) for w in v] for k, v in endog.items()},
        formulas=config.formulas,
        family=config.family_name,
        response=config.response,
        standardize_residuals=bool(iv_sec.get("standardize_residuals", False)),
        residual_terms=str(iv_sec.get("residual_terms", "linear")),
        weak_floor=float(iv_sec.get("weak_floor", 0.02)),
    )
    res = tsri_fit(result.data, spec)
    doc = new_report("iv", config_hash(config), config.raw, config.seed(),
                     result.accounting())
    doc["fit"] = _model_summary(res.model)
    doc["iv"] = {
        "endogenous": {
            var: {
                "instruments": spec.endogenous[var],
                "partial_r2": res.partial_r2[var],
                "first_stage_loglik": res.first_stage_models[var].loglik,
            }
            for var in spec.endogenous
        }
    }

    boot = config.bootstrap
    if boot:
        n_first = int(boot.get("first_stage_replicates", 20))
        n_second = int(boot.get("second_stage_replicates",
                                max(1, int(boot["replicates"]) // n_first)))
        alpha = float(boot["alpha"])
        rows = []
        for var in spec.endogenous:
            def coef_stat(model, var=var):
                return float(model.coefficients_named()["mu"][var])

            coef_stat.__name__ = f"coefficient_{var}"
            bres = bt.iv_bootstrap(
                result.data, spec, coef_stat, n_first, n_second,
                seed=int(boot["seed"]),
                first_stage_method=str(boot.get("first_stage_method", "parametric")),
            )
            summary = bt.summarize(bres, alpha=alpha,
                                   max_failure_rate=float(boot["max_failure_rate"]))
            row = summary.as_dict()
            row["endogenous"] = var
            rows.append(row)
        doc["iv"]["bootstrap"] = {
            "n_first": n_first, "n_second": n_second, "table": rows,
        }
    return doc


def cmd_rdd(config: AnalysisConfig) -> dict:
    result, fam, fs = _prepare_data(config)
    sec = config.section("rdd")
    if "forcing" not in sec or "cutoff" not in sec:
        raise ConfigError("[rdd] needs 'forcing' and 'cutoff'")
    bandwidths = sec.get("bandwidths", [None])
    if not isinstance(bandwidths, list):
        bandwidths = [bandwidths]
    functionals = _resolve_functionals(config, result.data) or [FunctionalKind("mean")]
    boot = config.bootstrap
    doc = new_report("rdd", config_hash(config), config.raw, config.seed(),
                     result.accounting())
    rows = []
    for bw in bandwidths:
        spec = RddSpec(
            forcing=str(sec["forcing"]),
            cutoff=float(sec["cutoff"]),
            bandwidth=None if bw is None else float(bw),
            formulas=config.formulas,
            family=config.family_name,
            response=config.response,
            fuzzy=bool(sec.get("fuzzy", False)),
            treatment=sec.get("treatment"),
            prob_formula=sec.get("prob_formula"),
            min_compliance=float(sec.get("min_compliance", 0.05)),
        )
        for fk in functionals:
            res = frd_fit(result.data, spec, fk) if spec.fuzzy else srd_fit(result.data, spec, fk)
            row = res.estimate.as_dict()
            row["bandwidth"] = bw
            row["n_left"], row["n_right"] = res.n_left, res.n_right
            if boot:
                bres = bt.rdd_bootstrap(result.data, spec, fk,
                                        B=int(boot["replicates"]),
                                        seed=int(boot["seed"]),
                                        workers=int(boot["workers"]))
                summary = bt.summarize(bres, alpha=float(boot["alpha"]),
                                       max_failure_rate=float(boot["max_failure_rate"]))
                row["lower"], row["upper"] = summary.ci_lower, summary.ci_upper
                row["B"] = int(boot["replicates"])
            rows.append(row)
    doc["rdd"] = {"table": rows}
    return doc


def cmd_panel(config: AnalysisConfig) -> dict:
    result, fam, fs = _prepare_data(config)
    sec = config.section("panel")
    unit = sec.get("unit")
    if not unit:
        raise ConfigError("[panel] needs a 'unit' column")
    model = panel_fit(
        result.data,
        unit=unit,
        formulas=config.formulas,
        family=config.family_name,
        mundlak=[str(v) for v in sec.get("mundlak", [])],
        response=config.response,
        re_lambda=float(sec.get("re_lambda", 1.0)),
    )
    doc = new_report("panel", config_hash(config), config.raw, config.seed(),
                     result.accounting())
    doc["fit"] = _model_summary(model)
    doc["panel"] = {"unit": unit, "mundlak": sec.get("mundlak", [])}
    return doc


def cmd_simulate(config: AnalysisConfig) -> dict:
    sec = config.section("simulate")
    n = int(sec.get("n", 1000))
    seed = int(sec.get("seed", 0))
    out_path = sec.get("output", "simulated.csv")
    out = config.output_dir / out_path
    csv_path, truth_path = write_simulation(sec, n, seed, out)
    doc = new_report("simulate", config_hash(config), config.raw, seed,
                     {"rows_written": n})
    doc["simulate"] = {"csv": csv_path.name, "truth": truth_path.name}
    return doc


COMMANDS = {
    "fit": cmd_fit,
    "diagnose": cmd_diagnose,
    "effects": cmd_effects,
    "bootstrap": cmd_bootstrap,
    "iv": cmd_iv,
    "rdd": cmd_rdd,
    "panel": cmd_panel,
    "simulate": cmd_simulate,
}


def run(subcommand: str, config: AnalysisConfig) -> dict:
    """Execute one subcommand and write its report; returns the report dict."""
    handler = COMMANDS[subcommand]
    doc = handler(config)
    if subcommand != "simulate":
        # absolute data path makes the report self-contained for regeneration
        doc["provenance"]["data_path"] = str(config.data_path.resolve())
    write_report(doc, config.output_dir / "report.json")
    return doc


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="distreg",
        description="Distributional regression for treatment effects beyond the mean",
    )
    parser.add_argument("subcommand", choices=sorted(COMMANDS))
    parser.add_argument("-c", "--config", required=True, help="TOML config file")
    args = parser.parse_args(argv)

    try:
        config = load_config(args.config)
        doc = run(args.subcommand, config)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DesignError, DomainError, DiagnosticsError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except bt.InferenceBlockedError as err:
        print(f"inference blocked: {err}", file=sys.stderr)
        return EXIT_BLOCKED
    except (FitError, EffectError, FunctionalError, MomentError, bt.BootstrapError) as err:
        print(f"estimation error: {err}", file=sys.stderr)
        return EXIT_ESTIMATION

    print(f"report written to {config.output_dir / 'report.json'}")
    for name in doc.get("artifacts", []):
        print(f"artifact: {config.output_dir / name}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
