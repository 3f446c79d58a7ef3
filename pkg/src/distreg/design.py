"""Compilation of per-parameter formulas into design blocks.

A formula string like ``"1 + T + poverty_index + s(age, k=20) + re(village)"``
compiles to an ordered list of blocks, each carrying a basis matrix, an
optional quadratic penalty, and enough state to re-evaluate the basis on new
data. Supported terms:

    1               intercept (required, exactly once per parameter)
    x               linear (numeric) or reference-coded indicators (categorical)
    a:b             interaction (elementwise products of the parents' columns)
    s(x, k=, degree=, diff=)   penalized B-spline
    re(g)           ridge-penalized group indicators (i.i.d. random effects)

Mundlak columns produced by :func:`build_mundlak_means` enter as ordinary
linear terms.
"""

from __future__ import annotations

import hashlib
import logging
import re
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.interpolate import BSpline
from scipy.linalg import null_space

logger = logging.getLogger(__name__)

__all__ = [
    "DesignError",
    "TermSpec",
    "DesignBlock",
    "FormulaSet",
    "parse_formula",
    "build_formula_set",
    "bspline_basis",
    "difference_penalty",
    "build_linear_block",
    "build_pspline_block",
    "build_random_effect_block",
    "build_mundlak_means",
    "assemble_design",
    "Design",
]

DEFAULT_KNOTS = 20
DEFAULT_DEGREE = 3
DEFAULT_DIFF_ORDER = 2


class DesignError(ValueError):
    """Invalid formula, variable, or data for design construction."""


@dataclass(frozen=True)
class TermSpec:
    """One additive-predictor term."""

    kind: str  # intercept | linear | categorical | interaction | pspline | random_effect | mundlak_mean
    variables: tuple[str, ...] = ()
    knots: int = DEFAULT_KNOTS
    degree: int = DEFAULT_DEGREE
    diff_order: int = DEFAULT_DIFF_ORDER

    def __post_init__(self):
        if self.kind == "pspline":
            if self.degree < 1:
                raise DesignError("spline degree must be >= 1")
            if self.diff_order < 1:
                raise DesignError("difference order must be >= 1")
            if self.knots < 1:
                raise DesignError("knot count must be >= 1")

    @property
    def label(self) -> str:
        if self.kind == "intercept":
            return "1"
        if self.kind == "pspline":
            return f"s({self.variables[0]})"
        if self.kind == "random_effect":
            return f"re({self.variables[0]})"
        if self.kind == "interaction":
            return ":".join(self.variables)
        return self.variables[0]


@dataclass
class DesignBlock:
    """Basis matrix plus penalty for one term.

    ``penalty`` is None for unpenalized blocks; penalized blocks carry a
    symmetric PSD matrix and a smoothing weight ``lam``. ``state`` holds
    whatever the term kind needs to rebuild its columns on new data.
    """

    term: TermSpec
    matrix: np.ndarray
    colnames: list[str]
    penalty: np.ndarray | None = None
    lam: float = 1.0
    state: dict = field(default_factory=dict)

    @property
    def n_coef(self) -> int:
        return self.matrix.shape[1]

    @property
    def penalized(self) -> bool:
        return self.penalty is not None

    def evaluate(self, data: pd.DataFrame) -> np.ndarray:
        """Re-create this block's columns for new data."""
        n = len(data)
        kind = self.term.kind
        if kind == "intercept":
            return np.ones((n, 1))
        if kind in ("linear", "mundlak_mean"):
            col = _numeric_column(data, self.variables_for_eval()[0])
            return col[:, None]
        if kind == "categorical":
            return _indicator_matrix(
                data[self.term.variables[0]], self.state["levels"][1:],
                self.term.variables[0], strict=True, reference=self.state["levels"][0],
            )
        if kind == "interaction":
            left = _expand_for_interaction(data, self.state["left"])
            right = _expand_for_interaction(data, self.state["right"])
            return _interaction_columns(left[0], right[0])[0]
        if kind == "pspline":
            x = _numeric_column(data, self.term.variables[0])
            lo, hi = self.state["xmin"], self.state["xmax"]
            if np.any(x < lo) or np.any(x > hi):
                n_out = int(np.sum((x < lo) | (x > hi)))
                logger.warning(
                    "clamping %d value(s) of '%s' to the training range [%g, %g]",
                    n_out, self.term.variables[0], lo, hi,
                )
                x = np.clip(x, lo, hi)
            raw = _bspline_matrix(x, self.state["knot_vector"], self.term.degree)
            return raw @ self.state["transform"]
        if kind == "random_effect":
            return _indicator_matrix(
                data[self.term.variables[0]], self.state["levels"],
                self.term.variables[0], strict=False,
            )
        raise DesignError(f"unknown term kind '{kind}'")

    def variables_for_eval(self) -> tuple[str, ...]:
        return self.state.get("columns", self.term.variables)


# ---------------------------------------------------------------------------
# Formula parsing
# ---------------------------------------------------------------------------

_SPLINE_RE = re.compile(r"^s\(\s*(\w+)\s*((?:,\s*\w+\s*=\s*\d+\s*)*)\)$")
_RE_RE = re.compile(r"^re\(\s*(\w+)\s*\)$")
_NAME_RE = re.compile(r"^\w+$")


def parse_formula(formula: str, categorical: set[str] | None = None) -> list[TermSpec]:
    """Parse a formula string into term specs.

    ``categorical`` names the columns to expand to indicators; everything
    else is treated as numeric.
    """
    categorical = categorical or set()
    terms: list[TermSpec] = []
    for piece in formula.split("+"):
        tok = piece.strip()
        if not tok:
            raise DesignError(f"empty term in formula '{formula}'")
        if tok == "1":
            terms.append(TermSpec("intercept"))
            continue
        m = _SPLINE_RE.match(tok)
        if m:
            opts = {"k": DEFAULT_KNOTS, "degree": DEFAULT_DEGREE, "diff": DEFAULT_DIFF_ORDER}
            for part in m.group(2).split(","):
                part = part.strip()
                if not part:
                    continue
                key, _, val = part.partition("=")
                key = key.strip()
                if key not in opts:
                    raise DesignError(f"unknown spline option '{key}' in '{tok}'")
                opts[key] = int(val)
            terms.append(
                TermSpec("pspline", (m.group(1),), knots=opts["k"],
                         degree=opts["degree"], diff_order=opts["diff"])
            )
            continue
        m = _RE_RE.match(tok)
        if m:
            terms.append(TermSpec("random_effect", (m.group(1),)))
            continue
        if ":" in tok:
            parts = tuple(p.strip() for p in tok.split(":"))
            if len(parts) != 2 or not all(_NAME_RE.match(p) for p in parts):
                raise DesignError(f"malformed interaction '{tok}'")
            terms.append(TermSpec("interaction", parts))
            continue
        if _NAME_RE.match(tok):
            kind = "categorical" if tok in categorical else "linear"
            terms.append(TermSpec(kind, (tok,)))
            continue
        raise DesignError(f"cannot parse term '{tok}'")
    return terms


@dataclass(frozen=True)
class FormulaSet:
    """Ordered term lists, one per distribution parameter."""

    terms: dict[str, tuple[TermSpec, ...]]

    def __post_init__(self):
        for param, tlist in self.terms.items():
            n_int = sum(1 for t in tlist if t.kind == "intercept")
            if n_int != 1:
                raise DesignError(
                    f"parameter '{param}' needs exactly one intercept term, found {n_int}"
                )

    def variables(self) -> set[str]:
        out: set[str] = set()
        for tlist in self.terms.values():
            for t in tlist:
                out.update(t.variables)
        return out


def build_formula_set(
    formulas: dict[str, str],
    param_names: tuple[str, ...],
    categorical: set[str] | None = None,
) -> FormulaSet:
    """Parse one formula string per parameter; missing ones are intercept-only."""
    unknown = set(formulas) - set(param_names)
    if unknown:
        raise DesignError(f"formulas given for unknown parameters: {sorted(unknown)}")
    terms = {}
    for name in param_names:
        terms[name] = tuple(parse_formula(formulas.get(name, "1"), categorical))
    return FormulaSet(terms)


# ---------------------------------------------------------------------------
# Basis construction
# ---------------------------------------------------------------------------


def _numeric_column(data: pd.DataFrame, name: str) -> np.ndarray:
    if name not in data.columns:
        raise DesignError(f"variable '{name}' not found in data")
    col = np.asarray(data[name], dtype=float)
    return col


def bspline_basis(x: np.ndarray, n_segments: int, degree: int):
    """Equally spaced B-spline basis over [min(x), max(x)].

    Returns (basis, knot_vector); the basis has ``n_segments + degree``
    columns and rows that sum to one.
    """
    x = np.asarray(x, dtype=float)
    lo, hi = float(np.min(x)), float(np.max(x))
    if hi <= lo:
        raise DesignError("spline variable must have spread")
    h = (hi - lo) / n_segments
    knot_vector = lo + h * np.arange(-degree, n_segments + degree + 1)
    return _bspline_matrix(x, knot_vector, degree), knot_vector


def _bspline_matrix(x, knot_vector, degree):
    # extrapolate=True keeps the right boundary point inside the last basis
    # support; inputs are clamped to the knot range before we get here.
    dm = BSpline.design_matrix(x, knot_vector, degree, extrapolate=True)
    return np.asarray(dm.todense())


def difference_penalty(m: int, order: int) -> np.ndarray:
    """D'D for the ``order``-th difference matrix on ``m`` coefficients."""
    d = np.diff(np.eye(m), n=order, axis=0)
    return d.T @ d


def build_linear_block(data: pd.DataFrame, variable: str,
                       categorical: bool = False) -> DesignBlock:
    """Unpenalized single column (numeric) or reference-coded indicators."""
    if categorical:
        levels = sorted(pd.unique(data[variable]).astype(str))
        if len(levels) < 2:
            raise DesignError(f"categorical '{variable}' needs at least 2 levels")
        mat = _indicator_matrix(data[variable], levels[1:], variable, strict=True,
                                reference=levels[0])
        names = [f"{variable}[{lv}]" for lv in levels[1:]]
        return DesignBlock(TermSpec("categorical", (variable,)), mat, names,
                           state={"levels": levels})
    col = _numeric_column(data, variable)
    if np.ptp(col) == 0.0:
        warnings.warn(
            f"variable '{variable}' is constant; combined with an intercept the "
            "design is rank-deficient",
            UserWarning, stacklevel=2,
        )
    return DesignBlock(TermSpec("linear", (variable,)), col[:, None], [variable])


def _indicator_matrix(series, levels, name, strict, reference=None):
    """0/1 columns for ``levels``; strict mode rejects unseen categories."""
    values = np.asarray(series).astype(str)
    if strict:
        allowed = set(levels) if reference is None else set(levels) | {reference}
        unseen = sorted(set(values) - allowed)
        if unseen:
            raise DesignError(f"unseen categorical level(s) {unseen} for '{name}'")
    mat = np.zeros((len(values), len(levels)))
    for j, lv in enumerate(levels):
        mat[:, j] = values == lv
    return mat


def build_pspline_block(
    x,
    knots: int = DEFAULT_KNOTS,
    degree: int = DEFAULT_DEGREE,
    diff_order: int = DEFAULT_DIFF_ORDER,
    variable: str = "x",
) -> DesignBlock:
    """Sum-to-zero-centered penalized B-spline block.

    The raw basis (``knots + degree`` columns, rows summing to one) is
    reparameterized onto the null space of its column-sum vector, which makes
    every retained column sum to zero and removes the intercept confound.
    """
    x = np.asarray(x, dtype=float)
    if np.unique(x).size < degree + 2:
        raise DesignError(
            f"spline on '{variable}' needs at least degree+2={degree + 2} distinct values"
        )
    raw, knot_vector = bspline_basis(x, knots, degree)
    m = raw.shape[1]
    s_raw = difference_penalty(m, diff_order)
    colsums = raw.sum(axis=0)
    transform = null_space(colsums[None, :])  # m x (m-1), orthonormal
    basis = raw @ transform
    penalty = transform.T @ s_raw @ transform
    penalty = 0.5 * (penalty + penalty.T)
    names = [f"s({variable}).{j}" for j in range(basis.shape[1])]
    term = TermSpec("pspline", (variable,), knots=knots, degree=degree, diff_order=diff_order)
    state = {
        "knot_vector": knot_vector,
        "transform": transform,
        "xmin": float(np.min(x)),
        "xmax": float(np.max(x)),
        "raw_penalty": s_raw,
        "n_basis": m,
    }
    return DesignBlock(term, basis, names, penalty=penalty, lam=1.0, state=state)


def build_random_effect_block(groups, variable: str = "group") -> DesignBlock:
    """Group-indicator basis with a ridge penalty (i.i.d. Gaussian effects)."""
    values = np.asarray(groups).astype(str)
    levels = sorted(set(values))
    if len(levels) < 2:
        raise DesignError(f"random effect '{variable}' needs at least 2 groups")
    sizes = pd.Series(values).value_counts()
    if int(sizes.max()) == 1:
        warnings.warn(
            f"random effect '{variable}' has only singleton groups; effects are "
            "not identifiable from the residual scale",
            UserWarning, stacklevel=2,
        )
    mat = np.zeros((len(values), len(levels)))
    for j, lv in enumerate(levels):
        mat[:, j] = values == lv
    names = [f"{variable}[{lv}]" for lv in levels]
    term = TermSpec("random_effect", (variable,))
    return DesignBlock(term, mat, names, penalty=np.eye(len(levels)), lam=1.0,
                       state={"levels": levels})


def build_mundlak_means(data: pd.DataFrame, variables, unit: str) -> pd.DataFrame:
    """Append per-unit means of time-varying variables as ``<var>_bar`` columns."""
    if unit not in data.columns:
        raise DesignError(f"unit id column '{unit}' not found")
    out = data.copy()
    for var in variables:
        if var not in data.columns:
            raise DesignError(f"variable '{var}' not found")
        col = np.asarray(data[var], dtype=float)
        means = data.groupby(unit)[var].transform("mean").to_numpy(dtype=float)
        if np.allclose(means, col, atol=1e-12):
            raise DesignError(
                f"variable '{var}' has no within-unit variation; its unit mean "
                "equals the variable and would be collinear"
            )
        name = f"{var}_bar"
        if name in out.columns:
            raise DesignError(f"column '{name}' already exists")
        out[name] = means
    return out


def _expand_for_interaction(data: pd.DataFrame, spec: dict):
    """Columns (matrix, names) for one parent of an interaction term."""
    if spec["categorical"]:
        mat = _indicator_matrix(data[spec["name"]], spec["levels"][1:],
                                spec["name"], strict=True, reference=spec["levels"][0])
        names = [f"{spec['name']}[{lv}]" for lv in spec["levels"][1:]]
    else:
        mat = _numeric_column(data, spec["name"])[:, None]
        names = [spec["name"]]
    return mat, names


def _interaction_columns(left: np.ndarray, right: np.ndarray):
    cols = []
    for i in range(left.shape[1]):
        for j in range(right.shape[1]):
            cols.append(left[:, i] * right[:, j])
    return np.column_stack(cols), None


def _build_interaction_block(data, term: TermSpec, categorical: set[str]) -> DesignBlock:
    specs = []
    for name in term.variables:
        if name in categorical:
            levels = sorted(pd.unique(data[name]).astype(str))
            specs.append({"name": name, "categorical": True, "levels": levels})
        else:
            specs.append({"name": name, "categorical": False})
    left, lnames = _expand_for_interaction(data, specs[0])
    right, rnames = _expand_for_interaction(data, specs[1])
    mat, _ = _interaction_columns(left, right)
    names = [f"{a}:{b}" for a in lnames for b in rnames]
    return DesignBlock(term, mat, names, state={"left": specs[0], "right": specs[1]})


@dataclass
class Design:
    """Per-parameter block lists ready for the fitter."""

    blocks: dict[str, list[DesignBlock]]
    n_obs: int
    fingerprint: str

    @property
    def n_coef(self) -> int:
        return sum(b.n_coef for blist in self.blocks.values() for b in blist)

    def param_matrix(self, param: str) -> np.ndarray:
        return np.hstack([b.matrix for b in self.blocks[param]])


def _schema_fingerprint(data: pd.DataFrame, columns) -> str:
    payload = ";".join(f"{c}:{data[c].dtype}" for c in sorted(columns))
    return hashlib.sha1(payload.encode()).hexdigest()[:16]


def assemble_design(
    formulas: FormulaSet,
    data: pd.DataFrame,
    categorical: set[str] | None = None,
) -> Design:
    """Compile a formula set against a data frame.

    Rejects missing variables and non-finite values (reporting row indices).
    Identical inputs produce bit-identical matrices.
    """
    categorical = categorical or {
        c for c in data.columns
        if data[c].dtype == object or isinstance(data[c].dtype, pd.CategoricalDtype)
    }
    used = formulas.variables()
    missing = sorted(v for v in used if v not in data.columns)
    if missing:
        raise DesignError(f"variables not found in data: {missing}")
    for var in sorted(used):
        if var in categorical:
            continue
        col = np.asarray(data[var], dtype=float)
        bad = np.flatnonzero(~np.isfinite(col))
        if bad.size:
            raise DesignError(
                f"non-finite values in '{var}' at rows {bad[:10].tolist()}"
                + ("..." if bad.size > 10 else "")
            )

    blocks: dict[str, list[DesignBlock]] = {}
    for param, term_list in formulas.terms.items():
        plist: list[DesignBlock] = []
        for term in term_list:
            if term.kind == "intercept":
                plist.append(DesignBlock(term, np.ones((len(data), 1)), ["intercept"]))
            elif term.kind in ("linear", "mundlak_mean"):
                name = term.variables[0]
                if name in categorical:
                    plist.append(build_linear_block(data, name, categorical=True))
                else:
                    blk = build_linear_block(data, name)
                    blk.term = term
                    plist.append(blk)
            elif term.kind == "categorical":
                plist.append(build_linear_block(data, term.variables[0], categorical=True))
            elif term.kind == "interaction":
                plist.append(_build_interaction_block(data, term, categorical))
            elif term.kind == "pspline":
                x = _numeric_column(data, term.variables[0])
                plist.append(
                    build_pspline_block(x, term.knots, term.degree, term.diff_order,
                                        variable=term.variables[0])
                )
            elif term.kind == "random_effect":
                plist.append(
                    build_random_effect_block(data[term.variables[0]],
                                              variable=term.variables[0])
                )
            else:
                raise DesignError(f"unknown term kind '{term.kind}'")
        blocks[param] = plist

    return Design(
        blocks=blocks,
        n_obs=len(data),
        fingerprint=_schema_fingerprint(data, used) if used else "none",
    )
