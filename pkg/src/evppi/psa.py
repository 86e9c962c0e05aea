"""PSA samples, net benefits and the EVPI/EVPPI estimator algebra."""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateColumnError,
    DomainError,
    InsufficientDataError,
    ParseError,
    SchemaError,
    ValidationError,
)

_EFFECT_RE = re.compile(r"^e(\d+)$")
_COST_RE = re.compile(r"^c(\d+)$")
_NB_RE = re.compile(r"^nb(\d+)$")


def _finite_matrix(m, name: str) -> np.ndarray:
    arr = np.asarray(m, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be a 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise ValidationError(f"{name} has a non-finite entry at row {bad[0]}, column {bad[1]}")
    return arr


@dataclass(frozen=True)
class PsaDataset:
    """S parameter draws plus per-treatment outcomes.

    Exactly one outcome representation is present: ``effects`` and ``costs``
    (each S x (T+1)) or ``net_benefits`` (S x (T+1)).
    """

    params: np.ndarray
    param_names: tuple[str, ...]
    effects: np.ndarray | None = None
    costs: np.ndarray | None = None
    net_benefits: np.ndarray | None = None

    def __post_init__(self):
        params = _finite_matrix(self.params, "params")
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "param_names", tuple(str(n) for n in self.param_names))
        S, P = params.shape
        if S < 2:
            raise InsufficientDataError(f"need at least 2 PSA rows, got {S}")
        if P < 1:
            raise ValidationError("need at least one parameter column")
        if len(self.param_names) != P:
            raise ValidationError(f"{len(self.param_names)} names for {P} parameter columns")
        if len(set(self.param_names)) != P:
            raise ValidationError("parameter names must be unique")

        has_ec = self.effects is not None or self.costs is not None
        has_nb = self.net_benefits is not None
        if has_ec == has_nb:
            raise SchemaError("provide either effect/cost pairs or net-benefit columns, not both")
        if has_ec:
            if self.effects is None or self.costs is None:
                raise SchemaError("effects and costs must both be given")
            e = _finite_matrix(self.effects, "effects")
            c = _finite_matrix(self.costs, "costs")
            if e.shape != c.shape or e.shape[0] != S:
                raise SchemaError(f"effects {e.shape} and costs {c.shape} must both be {S} x (T+1)")
            if e.shape[1] < 2:
                raise SchemaError("need at least two treatments")
            object.__setattr__(self, "effects", e)
            object.__setattr__(self, "costs", c)
        else:
            nb = _finite_matrix(self.net_benefits, "net_benefits")
            if nb.shape[0] != S:
                raise SchemaError(f"net benefits have {nb.shape[0]} rows, params have {S}")
            if nb.shape[1] < 2:
                raise SchemaError("need at least two treatments")
            object.__setattr__(self, "net_benefits", nb)

    @property
    def S(self) -> int:
        return self.params.shape[0]

    @property
    def P(self) -> int:
        return self.params.shape[1]

    @property
    def T(self) -> int:
        """Number of non-reference treatments."""
        outcome = self.net_benefits if self.net_benefits is not None else self.effects
        return outcome.shape[1] - 1

    @property
    def mode(self) -> str:
        return "net-benefit" if self.net_benefits is not None else "effect-cost"

    def subset(self, spec: "SubsetSpec | Sequence[int | str]") -> "SubsetSpec":
        if isinstance(spec, SubsetSpec):
            spec.check(self.P)
            return spec
        return SubsetSpec.from_labels(spec, self.param_names)

    def outcome_columns(self) -> dict[str, np.ndarray]:
        cols: dict[str, np.ndarray] = {}
        if self.net_benefits is not None:
            for t in range(self.T + 1):
                cols[f"nb{t}"] = self.net_benefits[:, t]
        else:
            for t in range(self.T + 1):
                cols[f"e{t}"] = self.effects[:, t]
                cols[f"c{t}"] = self.costs[:, t]
        return cols

    def to_csv(self, path: str | Path) -> None:
        outcomes = self.outcome_columns()
        header = list(self.param_names) + list(outcomes)
        data = np.column_stack([self.params] + list(outcomes.values()))
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in data:
                writer.writerow([repr(float(v)) for v in row])


@dataclass(frozen=True)
class SubsetSpec:
    """Focal parameter indices; the complement is everything else."""

    focal: tuple[int, ...]
    n_params: int

    def __post_init__(self):
        object.__setattr__(self, "focal", tuple(int(i) for i in self.focal))
        self.check(self.n_params)

    def check(self, n_params: int) -> None:
        if n_params != self.n_params:
            raise ValidationError(f"subset built for {self.n_params} parameters, dataset has {n_params}")
        if not self.focal:
            raise ValidationError("focal subset is empty")
        if len(set(self.focal)) != len(self.focal):
            raise ValidationError(f"duplicate focal indices in {self.focal}")
        bad = [i for i in self.focal if not 0 <= i < n_params]
        if bad:
            raise ValidationError(f"focal indices {bad} outside 0..{n_params - 1}")

    @property
    def complement(self) -> tuple[int, ...]:
        focal = set(self.focal)
        return tuple(i for i in range(self.n_params) if i not in focal)

    @classmethod
    def all(cls, n_params: int) -> "SubsetSpec":
        return cls(tuple(range(n_params)), n_params)

    @classmethod
    def from_labels(cls, labels: Sequence[int | str], names: Sequence[str]) -> "SubsetSpec":
        """Resolve parameter names (or integer indices) against ``names``."""
        lookup = {n: i for i, n in enumerate(names)}
        idx = []
        for lab in labels:
            if isinstance(lab, (int, np.integer)):
                idx.append(int(lab))
            elif lab in lookup:
                idx.append(lookup[lab])
            elif isinstance(lab, str) and lab.strip().lstrip("-").isdigit() and lab.strip() not in lookup:
                idx.append(int(lab))
            else:
                raise SchemaError(f"unknown parameter column {lab!r}")
        return cls(tuple(idx), len(names))


@dataclass(frozen=True)
class NetBenefitMatrix:
    nb: np.ndarray
    wtp: float | None = None
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        nb = _finite_matrix(self.nb, "net benefit")
        object.__setattr__(self, "nb", nb)

    @property
    def S(self) -> int:
        return self.nb.shape[0]

    @property
    def T(self) -> int:
        return self.nb.shape[1] - 1


@dataclass(frozen=True)
class FittedSurfaces:
    """Fitted conditional expectations, one column per treatment."""

    ghat: np.ndarray
    residual_sd: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        object.__setattr__(self, "ghat", _finite_matrix(self.ghat, "fitted surfaces"))
        object.__setattr__(self, "residual_sd", np.asarray(self.residual_sd, dtype=float))


@dataclass(frozen=True)
class RescaleRecord:
    center: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        if np.any(~(np.asarray(self.scale) > 0)):
            raise ValidationError("rescale record needs strictly positive scales")

    def apply(self, m: np.ndarray) -> np.ndarray:
        return (np.asarray(m, dtype=float) - self.center) / self.scale

    def invert(self, m: np.ndarray) -> np.ndarray:
        return np.asarray(m, dtype=float) * self.scale + self.center


@dataclass(frozen=True)
class PsaSchema:
    """Explicit column roles; anything left as ``None`` falls back to the name convention."""

    params: Sequence[str] | None = None
    effects: Sequence[str] | None = None
    costs: Sequence[str] | None = None
    net_benefits: Sequence[str] | None = None


def _ordered_by_index(matches: dict[int, str], kind: str) -> list[str]:
    idx = sorted(matches)
    if idx != list(range(len(idx))):
        raise SchemaError(f"{kind} columns must be numbered 0..T without gaps, got {idx}")
    return [matches[i] for i in idx]


def _resolve_roles(header: list[str], schema: PsaSchema) -> tuple[list[str], list[str], list[str], list[str]]:
    missing = [c for group in (schema.params, schema.effects, schema.costs, schema.net_benefits)
               if group for c in group if c not in header]
    if missing:
        raise SchemaError(f"declared columns not in header: {missing}")

    effects = list(schema.effects or [])
    costs = list(schema.costs or [])
    nbs = list(schema.net_benefits or [])
    if not (effects or costs or nbs):
        e = {int(m.group(1)): h for h in header if (m := _EFFECT_RE.match(h))}
        c = {int(m.group(1)): h for h in header if (m := _COST_RE.match(h))}
        n = {int(m.group(1)): h for h in header if (m := _NB_RE.match(h))}
        if (e or c) and n:
            raise SchemaError("header has both effect/cost and net-benefit columns")
        if e or c:
            if set(e) != set(c):
                raise SchemaError(f"effect indices {sorted(e)} do not match cost indices {sorted(c)}")
            effects = _ordered_by_index(e, "effect")
            costs = _ordered_by_index(c, "cost")
        elif n:
            nbs = _ordered_by_index(n, "net-benefit")
        else:
            raise SchemaError("no outcome columns found (expected e<t>/c<t> or nb<t>)")

    outcome = set(effects) | set(costs) | set(nbs)
    if schema.params is not None:
        params = list(schema.params)
    else:
        params = [h for h in header if h not in outcome]
    return params, effects, costs, nbs


def _parse_cell(text: str, row: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"non-numeric cell {text!r} at row {row}, column {column!r}",
                         row=row, column=column) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite cell {text!r} at row {row}, column {column!r}",
                         row=row, column=column)
    return value


def load_psa(source: str | Path, schema: PsaSchema | None = None) -> PsaDataset:
    """Read a PSA export from CSV.

    Rows are numbered from 1 for the first data row in error messages.
    """
    schema = schema or PsaSchema()
    path = Path(source)
    if not path.exists():
        raise SchemaError(f"no such file: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path} is empty (header row required)") from None
        rows = [r for r in reader if r and any(cell.strip() for cell in r)]

    if len(set(header)) != len(header):
        raise SchemaError(f"duplicate column names in header: {header}")
    params, effects, costs, nbs = _resolve_roles(header, schema)
    if len(rows) < 2:
        raise InsufficientDataError(f"need at least 2 data rows, {path} has {len(rows)}")

    pos = {h: i for i, h in enumerate(header)}
    wanted = params + effects + costs + nbs
    data = np.empty((len(rows), len(wanted)))
    for r, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise ParseError(f"row {r} has {len(row)} cells, header has {len(header)}", row=r)
        for j, name in enumerate(wanted):
            data[r - 1, j] = _parse_cell(row[pos[name]].strip(), r, name)

    P, nE, nC = len(params), len(effects), len(costs)
    block = data[:, :P]
    if nbs:
        return PsaDataset(block, params, net_benefits=data[:, P + nE + nC:])
    return PsaDataset(block, params, effects=data[:, P:P + nE], costs=data[:, P + nE:P + nE + nC])


def net_benefit(ds: PsaDataset, k: float) -> NetBenefitMatrix:
    """nb[s, t] = k * e[s, t] - c[s, t].

    Net-benefit-mode datasets pass through unchanged with a warning recorded.
    """
    if not k >= 0:
        raise DomainError(f"willingness-to-pay must be non-negative, got {k}")
    if ds.net_benefits is not None:
        return NetBenefitMatrix(ds.net_benefits.copy(), None,
                                ("dataset carries net benefits directly; willingness-to-pay ignored",))
    return NetBenefitMatrix(k * ds.effects - ds.costs, float(k))


def incremental_net_benefit(nb: NetBenefitMatrix) -> NetBenefitMatrix:
    if nb.T < 1:
        raise ValidationError("incremental net benefit needs at least two treatments")
    inc = nb.nb - nb.nb[:, :1]
    inc[:, 0] = 0.0
    return NetBenefitMatrix(inc, nb.wtp, nb.warnings)


def _two_term(m: np.ndarray) -> float:
    # mean of row maxima minus the best column mean, written as the mean regret
    # against the best-on-average arm: identical algebra, but every summand is
    # >= 0 and identical arms give exactly 0
    best = optimal_arm(m)
    return float(np.mean(np.max(m, axis=1) - m[:, best]))


def evpi_mc(nb: NetBenefitMatrix | np.ndarray) -> float:
    """Mean of row maxima minus maximum of column means."""
    m = nb.nb if isinstance(nb, NetBenefitMatrix) else np.asarray(nb, dtype=float)
    return _two_term(np.atleast_2d(m))


def evppi_from_fitted(fitted: FittedSurfaces | np.ndarray) -> float:
    # raw value, never clamped; the regret form cannot go below zero
    g = fitted.ghat if isinstance(fitted, FittedSurfaces) else np.asarray(fitted, dtype=float)
    if not np.all(np.isfinite(g)):
        raise ValidationError("fitted surfaces contain non-finite values")
    return _two_term(np.atleast_2d(g))


def optimal_arm(m: np.ndarray) -> int:
    """Index of the best treatment by column mean; ties go to the lowest index."""
    return int(np.argmax(np.mean(np.asarray(m, dtype=float), axis=0)))


def rescale_columns(m, names: Sequence[str] | None = None) -> tuple[np.ndarray, RescaleRecord]:
    """Center each column to mean 0 and scale to unit sample sd (divisor S-1)."""
    arr = np.asarray(m, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.shape[0] < 2:
        raise InsufficientDataError("rescaling needs at least two rows")
    center = arr.mean(axis=0)
    scale = arr.std(axis=0, ddof=1)
    for j, sd in enumerate(scale):
        # relative test: columns constant up to rounding count as degenerate
        if not sd > 1e-13 * max(1.0, abs(center[j])):
            label = names[j] if names is not None else j
            raise DegenerateColumnError(f"column {label!r} has zero variance", column=label)
    record = RescaleRecord(center, scale)
    return record.apply(arr), record
