"""Estimate container, residual diagnostics and the JSON report layout."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy import stats

from .errors import ValidationError

REPORT_VERSION = 1


@dataclass(frozen=True)
class Diagnostics:
    standardized_residuals: np.ndarray
    residual_fitted_corr: float
    corr_pvalue: float
    runs: int
    runs_z: float
    runs_pvalue: float
    flags: dict[str, bool]

    @property
    def structured(self) -> bool:
        return self.flags.get("structured", False)

    def to_dict(self, with_residuals: bool = False) -> dict:
        d = {
            "residual_fitted_corr": _num(self.residual_fitted_corr),
            "corr_pvalue": _num(self.corr_pvalue),
            "runs": self.runs,
            "runs_z": _num(self.runs_z),
            "runs_pvalue": _num(self.runs_pvalue),
            "flags": dict(self.flags),
        }
        if with_residuals:
            d["standardized_residuals"] = self.standardized_residuals.tolist()
        return d


def _num(x: float) -> float | None:
    return None if x is None or not math.isfinite(x) else float(x)


def runs_test(signs: np.ndarray) -> tuple[int, float, float]:
    """Wald-Wolfowitz runs test on a boolean sequence: (runs, z, two-sided p)."""
    s = np.asarray(signs, dtype=bool)
    n1 = int(s.sum())
    n2 = s.size - n1
    runs = int(1 + np.count_nonzero(s[1:] != s[:-1])) if s.size else 0
    if n1 == 0 or n2 == 0:
        return runs, float("nan"), float("nan")
    n = n1 + n2
    mu = 2.0 * n1 * n2 / n + 1.0
    var = (mu - 1.0) * (mu - 2.0) / (n - 1.0)
    if var <= 0:
        return runs, float("nan"), float("nan")
    z = (runs - mu) / math.sqrt(var)
    return runs, z, float(2.0 * stats.norm.sf(abs(z)))


def residual_diagnostics(fitted, observed, alpha: float = 0.01) -> Diagnostics:
    """Residual structure checks at significance ``alpha``.

    Residual signs are ordered by fitted value for the runs test; a small
    number of runs means the residuals drift systematically with the fit.
    """
    f = np.asarray(fitted, dtype=float).ravel()
    y = np.asarray(observed, dtype=float).ravel()
    if f.shape != y.shape:
        raise ValidationError(f"fitted {f.shape} and observed {y.shape} lengths differ")
    r = y - f
    scale = max(np.abs(y).max(initial=0.0), 1.0)
    sd = r.std(ddof=1) if r.size > 1 else 0.0
    if not sd > 1e-12 * scale:
        return Diagnostics(np.zeros_like(r), float("nan"), float("nan"), 0, float("nan"), float("nan"),
                           {"degenerate": True, "structured": False, "correlated": False, "runs": False})
    std_r = (r - r.mean()) / sd
    if f.std() > 1e-12 * max(np.abs(f).max(), 1.0):
        corr, corr_p = stats.pearsonr(f, r)
        corr, corr_p = float(corr), float(corr_p)
    else:
        corr, corr_p = 0.0, 1.0
    order = np.argsort(f, kind="stable")
    nz = r[order] != 0
    runs, z, p = runs_test(r[order][nz] > 0)
    correlated = corr_p < alpha
    runs_flag = bool(math.isfinite(p) and p < alpha)
    return Diagnostics(std_r, corr, corr_p, runs, z, p,
                       {"degenerate": False, "correlated": bool(correlated), "runs": runs_flag,
                        "structured": bool(correlated or runs_flag)})


@dataclass
class TreatmentFit:
    """Per-treatment regression output; method-specific extras live in ``info``."""

    treatment: int
    fitted: np.ndarray
    observed: np.ndarray
    diagnostics: Diagnostics | None
    residual_sd: float
    info: dict[str, Any] = field(default_factory=dict)
    plot: dict[str, Any] = field(default_factory=dict)


@dataclass
class EvppiEstimate:
    value: float
    method: str
    evpi: float | None
    wtp: float | None
    subset: list[str]
    seed: int | None
    timing_s: float
    fitted: np.ndarray | None = None
    observed: np.ndarray | None = None
    treatments: list[TreatmentFit] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    config: dict[str, Any] = field(default_factory=dict)
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def must_check_residuals(self) -> bool:
        return any(t.info.get("must_check_residuals", False) for t in self.treatments)

    @property
    def diagnostics(self) -> list[Diagnostics]:
        return [t.diagnostics for t in self.treatments if t.diagnostics is not None]

    def to_report(self) -> dict:
        rep: dict[str, Any] = {
            "version": REPORT_VERSION,
            "method": self.method,
            "value": self.value,
            "evpi": self.evpi,
            "wtp": self.wtp,
            "subset": list(self.subset),
            "seed": self.seed,
            "timing_s": self.timing_s,
        }
        per = self.treatments
        for key in ("pfc", "mesh", "grid", "gp"):
            blocks = [{"treatment": t.treatment, **t.info[key]} for t in per if key in t.info]
            if blocks:
                # the first fitted treatment fills the top level; every treatment is listed below it
                rep[key] = {**blocks[0], "treatments": blocks}
        if self.fitted is not None:
            rep["diagnostics"] = {
                "must_check_residuals": self.must_check_residuals,
                "treatments": [
                    {"treatment": t.treatment, "residual_sd": t.residual_sd,
                     **(t.diagnostics.to_dict() if t.diagnostics is not None else {"flags": {"degenerate": True}})}
                    for t in per
                ],
            }
            rep["surfaces"] = {"fitted": self.fitted.tolist(), "observed": self.observed.tolist()}
            plots = {str(t.treatment): t.plot for t in per if t.plot}
            if plots:
                rep["plot_data"] = plots
        rep["warnings"] = list(self.warnings)
        rep["config"] = self.config
        rep.update(self.extra)
        return rep

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_report(), indent=1, default=_json_default))


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def read_report(path: str | Path) -> dict:
    try:
        rep = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read report {path}: {exc}") from None
    if not isinstance(rep, dict) or "method" not in rep or "value" not in rep:
        raise ValidationError(f"{path} is not an estimate report")
    return rep
