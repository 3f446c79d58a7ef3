"""Deterministic simulation generator for testing and acceptance checks.

Builds covariates, forms each distribution parameter's predictor from
configured coefficients, optionally layers cluster effects, an unobserved
confounder with an instrument, or a discontinuity in a forcing variable, and
samples the response. A sidecar JSON records the ground truth for oracle
checks.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pandas as pd

from distreg.cli.config import ConfigError
from distreg.families import get_family
from distreg.rng import STREAM_SIMULATE, substream

__all__ = ["simulate_dataset", "write_simulation"]


def _draw_covariate(cov: dict, n: int, rng: np.random.Generator) -> np.ndarray:
    kind = cov.get("kind", "normal")
    if kind == "normal":
        return rng.normal(cov.get("mean", 0.0), cov.get("sd", 1.0), n)
    if kind == "uniform":
        return rng.uniform(cov.get("low", 0.0), cov.get("high", 1.0), n)
    if kind == "bernoulli":
        return (rng.random(n) < cov.get("p", 0.5)).astype(float)
    if kind == "categorical":
        levels = cov.get("levels")
        if not levels:
            raise ConfigError(f"categorical covariate '{cov.get('name')}' needs levels")
        return rng.choice(np.asarray(levels, dtype=object), n)
    raise ConfigError(f"unknown covariate kind '{kind}'")


def _eta_from_coefficients(coeffs: dict, frame: pd.DataFrame, n: int) -> np.ndarray:
    eta = np.full(n, float(coeffs.get("intercept", 0.0)))
    for name, beta in coeffs.items():
        if name == "intercept":
            continue
        if name not in frame.columns:
            raise ConfigError(f"coefficient references unknown column '{name}'")
        eta = eta + float(beta) * np.asarray(frame[name], dtype=float)
    return eta


def simulate_dataset(spec: dict, n: int, seed: int) -> tuple[pd.DataFrame, dict]:
    """Generate ``n`` rows under ``spec``; returns (data, ground truth)."""
    family = get_family(spec.get("family", "normal"))
    rng = substream(seed, STREAM_SIMULATE)
    frame = pd.DataFrame(index=range(n))
    truth: dict = {"family": family.name, "n": n, "seed": seed,
                   "coefficients": spec.get("coefficients", {})}

    for cov in spec.get("covariates", []):
        name = cov.get("name")
        if not name:
            raise ConfigError("every covariate needs a name")
        frame[name] = _draw_covariate(cov, n, rng)

    rdd = spec.get("rdd")
    if rdd:
        forcing = rdd.get("forcing", "x")
        frame[forcing] = rng.uniform(rdd.get("low", -1.0), rdd.get("high", 1.0), n)
        truth["rdd"] = dict(rdd)

    endo = spec.get("endogeneity")
    confounder = None
    if endo:
        confounder = rng.normal(size=n)
        instrument = endo.get("instrument", "w")
        frame[instrument] = rng.normal(size=n)
        var = endo.get("endogenous", "x_e")
        frame[var] = (
            float(endo.get("intercept", 0.0))
            + float(endo.get("instrument_strength", 0.8)) * np.asarray(frame[instrument], dtype=float)
            + float(endo.get("confounding_on_x", 0.8)) * confounder
            + rng.normal(scale=float(endo.get("noise_sd", 0.5)), size=n)
        )
        truth["endogeneity"] = dict(endo)

    cluster = spec.get("cluster")
    cluster_shift = np.zeros(n)
    if cluster:
        column = cluster.get("column", "cluster")
        count = int(cluster.get("count", 10))
        ids = rng.integers(0, count, n)
        frame[column] = np.array([f"c{int(i):04d}" for i in ids], dtype=object)
        sd = cluster.get("sd")
        if sd is None and "icc" in cluster:
            icc = float(cluster["icc"])
            sigma_coeffs = spec.get("coefficients", {}).get("sigma", {})
            resid_sd = float(np.exp(sigma_coeffs.get("intercept", 0.0)))
            sd = resid_sd * np.sqrt(icc / (1.0 - icc))
        effects = rng.normal(scale=float(sd or 1.0), size=count)
        cluster_shift = effects[ids]
        truth["cluster"] = {"column": column, "count": count, "sd": float(sd or 1.0)}

    coeffs = spec.get("coefficients", {})
    etas = []
    for k, pname in enumerate(family.param_names):
        eta = _eta_from_coefficients(coeffs.get(pname, {}), frame, n)
        if k == 0:
            eta = eta + cluster_shift
            if confounder is not None:
                eta = eta + float(endo.get("confounding_on_y", 0.9)) * confounder
        if rdd:
            jump = rdd.get("jumps", {}).get(pname, 0.0)
            above = np.asarray(frame[rdd.get("forcing", "x")], dtype=float) >= float(
                rdd.get("cutoff", 0.0)
            )
            eta = eta + float(jump) * above
        etas.append(eta)

    if rdd and rdd.get("fuzzy"):
        fuzzy = rdd["fuzzy"]
        above = np.asarray(frame[rdd.get("forcing", "x")], dtype=float) >= float(
            rdd.get("cutoff", 0.0)
        )
        p = np.where(above, float(fuzzy.get("p_high", 0.8)), float(fuzzy.get("p_low", 0.2)))
        t_col = fuzzy.get("treatment", "T")
        frame[t_col] = (rng.random(n) < p).astype(float)
        etas[0] = etas[0] + float(fuzzy.get("effect", 1.0)) * np.asarray(
            frame[t_col], dtype=float
        )
        truth.setdefault("rdd", {})["fuzzy"] = dict(fuzzy)

    theta = tuple(
        info.link.inverse(eta) for info, eta in zip(family.params, etas)
    )
    response = spec.get("response", "y")
    if n:
        frame[response] = family.sample(theta, rng)
    else:
        frame[response] = np.empty(0)
    return frame, truth


def write_simulation(spec: dict, n: int, seed: int, out_path) -> tuple[Path, Path]:
    """Write the dataset CSV and its ground-truth sidecar; returns both paths."""
    frame, truth = simulate_dataset(spec, n, seed)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out_path, index=False, lineterminator="\n")
    truth_path = out_path.with_suffix(out_path.suffix + ".truth.json")
    truth_path.write_text(json.dumps(truth, sort_keys=True, indent=2) + "\n")
    return out_path, truth_path
