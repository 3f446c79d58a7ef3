"""Analysis configuration: a TOML file with one section per concern.

Minimal example::

    [data]
    path = "households.csv"
    filters = ["y > 0", "y <= 10000"]

    [data.schema]
    y = "numeric"
    T = "numeric"
    village = "categorical"

    [model]
    family = "singh-maddala"
    response = "y"
    treatment = "T"

    [model.formulas]
    mu = "1 + T"
    sigma = "1 + T"
    tau = "1"

    [functionals]
    list = ["mean", "gini", "vulnerability:auto60"]

    [bootstrap]
    method = "pairs-cluster"
    replicates = 499
    seed = 1
    cluster = "village"

    [output]
    dir = "out/run1"

The formula grammar is documented in docs/formulas.md.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from distreg.families import FAMILIES

__all__ = ["ConfigError", "AnalysisConfig", "load_config", "config_hash"]

COLUMN_KINDS = ("numeric", "categorical", "count")
BOOTSTRAP_METHODS = ("parametric", "pairs-cluster")


class ConfigError(ValueError):
    pass


@dataclass
class AnalysisConfig:
    raw: dict
    path: Path | None = None

    # -- accessors with validation ------------------------------------

    def section(self, name: str, required: bool = True) -> dict:
        sec = self.raw.get(name)
        if sec is None:
            if required:
                raise ConfigError(f"missing [{name}] section")
            return {}
        if not isinstance(sec, dict):
            raise ConfigError(f"[{name}] must be a table")
        return sec

    @property
    def data_path(self) -> Path:
        sec = self.section("data")
        if "path" not in sec:
            raise ConfigError("[data] needs a 'path'")
        p = Path(sec["path"])
        if not p.is_absolute() and self.path is not None:
            p = self.path.parent / p
        return p

    @property
    def schema(self) -> dict[str, str]:
        sec = self.section("data")
        schema = sec.get("schema")
        if not schema:
            raise ConfigError("[data.schema] must map every used column to a kind")
        for col, kind in schema.items():
            if kind not in COLUMN_KINDS:
                raise ConfigError(
                    f"column '{col}' has unknown kind '{kind}' "
                    f"(expected one of {COLUMN_KINDS})"
                )
        return dict(schema)

    @property
    def filters(self) -> list[str]:
        return list(self.section("data").get("filters", []))

    @property
    def family_name(self) -> str:
        fam = self.section("model").get("family")
        if fam not in FAMILIES:
            raise ConfigError(f"unknown family '{fam}'; available: {sorted(FAMILIES)}")
        return fam

    @property
    def response(self) -> str:
        resp = self.section("model").get("response")
        if not resp:
            raise ConfigError("[model] needs a 'response' column")
        self._require_in_schema(resp)
        return resp

    @property
    def treatment(self) -> str | None:
        t = self.section("model").get("treatment")
        if t is not None:
            self._require_in_schema(t)
        return t

    @property
    def formulas(self) -> dict[str, str]:
        sec = self.section("model").get("formulas")
        if not sec:
            raise ConfigError("[model.formulas] is required")
        return {str(k): str(v) for k, v in sec.items()}

    @property
    def functional_ids(self) -> list[str]:
        return [str(f) for f in self.section("functionals", required=False).get("list", [])]

    @property
    def profile_overrides(self) -> dict:
        return dict(self.section("profile", required=False))

    @property
    def bootstrap(self) -> dict:
        sec = dict(self.section("bootstrap", required=False))
        if not sec:
            return {}
        method = sec.setdefault("method", "parametric")
        if method not in BOOTSTRAP_METHODS:
            raise ConfigError(
                f"bootstrap method '{method}' unknown (one of {BOOTSTRAP_METHODS})"
            )
        if method == "pairs-cluster" and not sec.get("cluster"):
            raise ConfigError("pairs-cluster bootstrap needs a 'cluster' column")
        if sec.get("cluster"):
            self._require_in_schema(sec["cluster"])
        sec.setdefault("replicates", 499)
        sec.setdefault("seed", 0)
        sec.setdefault("alpha", 0.05)
        sec.setdefault("workers", 1)
        sec.setdefault("max_failure_rate", 0.05)
        return sec

    @property
    def output_dir(self) -> Path:
        out = self.section("output", required=False).get("dir", "out")
        p = Path(out)
        if not p.is_absolute() and self.path is not None:
            p = self.path.parent / p
        return p

    def _require_in_schema(self, col: str) -> None:
        if col not in self.schema:
            raise ConfigError(f"column '{col}' is not declared in [data.schema]")

    def categorical_columns(self) -> set[str]:
        return {c for c, kind in self.schema.items() if kind == "categorical"}

    def seed(self) -> int:
        return int(self.bootstrap.get("seed", self.raw.get("seed", 0)))


def load_config(path) -> AnalysisConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"config parse error in {path}: {err}") from None
    return AnalysisConfig(raw=raw, path=path)


def config_from_provenance(report: dict) -> AnalysisConfig:
    """Rebuild a runnable configuration from a report's provenance block."""
    prov = report.get("provenance", {})
    raw = prov.get("config")
    if not raw:
        raise ConfigError("report has no embedded configuration")
    raw = json.loads(json.dumps(raw))  # deep copy
    data_path = prov.get("data_path")
    if data_path:
        raw.setdefault("data", {})["path"] = data_path
    return AnalysisConfig(raw=raw, path=None)


def config_hash(config: AnalysisConfig) -> str:
    """Stable digest of the parsed configuration (not the file bytes)."""
    canonical = json.dumps(config.raw, sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]
