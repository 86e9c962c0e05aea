"""Synthetic decision models with exact or brute-force EVPPI oracles.

Two model families live here.  The influenza toy model has five positive
parameters and closed-form effects and costs.  The Gaussian model class draws
parameters from a multivariate normal and defines net benefits as quadratic
forms, so that conditional expectations given any parameter subset are
available in closed form.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg

from .errors import ConfigError, NumericError, ValidationError
from .psa import PsaDataset, SubsetSpec, _two_term as psa_two_term

INFLUENZA_PARAMS = ("pi", "lambda", "gamma", "xi", "rho")

_DOMAINS = {
    "pi": (0.0, 1.0),
    "lambda": (0.0, np.inf),
    "gamma": (0.0, np.inf),
    "xi": (0.0, np.inf),
    "rho": (0.0, 1.0),
}


@dataclass(frozen=True)
class Dist:
    """A univariate distribution: ``point``, ``beta``, ``gamma``, ``lognormal`` or ``uniform``.

    ``gamma`` takes (shape, scale); ``lognormal`` takes (meanlog, sdlog).
    """

    kind: str
    params: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        arity = {"point": 1, "beta": 2, "gamma": 2, "lognormal": 2, "uniform": 2}
        if self.kind not in arity:
            raise ConfigError(f"unknown distribution kind {self.kind!r}")
        if len(self.params) != arity[self.kind]:
            raise ConfigError(f"{self.kind} takes {arity[self.kind]} parameters, got {len(self.params)}")
        p = self.params
        if self.kind in ("beta", "gamma") and not (p[0] > 0 and p[1] > 0):
            raise ConfigError(f"{self.kind}{p} needs positive parameters")
        if self.kind == "lognormal" and not p[1] >= 0:
            raise ConfigError(f"lognormal sdlog must be non-negative, got {p[1]}")
        if self.kind == "uniform" and not p[0] < p[1]:
            raise ConfigError(f"uniform needs low < high, got {p}")

    def support(self) -> tuple[float, float]:
        p = self.params
        if self.kind == "point":
            return p[0], p[0]
        if self.kind == "uniform":
            return p[0], p[1]
        return (0.0, 1.0) if self.kind == "beta" else (0.0, np.inf)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        p = self.params
        if self.kind == "point":
            return np.full(n, p[0])
        if self.kind == "beta":
            return rng.beta(p[0], p[1], size=n)
        if self.kind == "gamma":
            return rng.gamma(p[0], p[1], size=n)
        if self.kind == "lognormal":
            return rng.lognormal(p[0], p[1], size=n)
        return rng.uniform(p[0], p[1], size=n)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": list(self.params)}


@dataclass(frozen=True)
class InfluenzaConfig:
    pi: Dist = Dist("beta", (2.0, 8.0))
    lam: Dist = Dist("gamma", (4.0, 0.5))
    gamma: Dist = Dist("lognormal", (float(np.log(10.0)), 0.2))
    xi: Dist = Dist("lognormal", (float(np.log(5.0)), 0.3))
    rho: Dist = Dist("beta", (6.0, 4.0))
    seed: int = 0

    def __post_init__(self):
        for name, dist in zip(INFLUENZA_PARAMS, self.dists()):
            lo, hi = dist.support()
            dlo, dhi = _DOMAINS[name]
            if lo < dlo or hi > dhi:
                raise ConfigError(f"{name} ~ {dist.kind}{dist.params} leaves its domain [{dlo}, {dhi}]")
            if name == "lambda" and lo <= 0 and dist.kind == "point":
                raise ConfigError("illness duration must be positive")
            if name == "rho" and dist.kind == "point" and lo <= 0:
                raise ConfigError("risk-reduction factor must be positive")

    def dists(self) -> tuple[Dist, ...]:
        return (self.pi, self.lam, self.gamma, self.xi, self.rho)

    def to_dict(self) -> dict:
        d = {name: dist.to_dict() for name, dist in zip(INFLUENZA_PARAMS, self.dists())}
        return {"kind": "influenza", "seed": self.seed, "distributions": d}

    @classmethod
    def from_dict(cls, d: dict) -> "InfluenzaConfig":
        dd = d["distributions"]
        get = lambda k: Dist(dd[k]["kind"], tuple(dd[k]["params"]))  # noqa: E731
        return cls(get("pi"), get("lambda"), get("gamma"), get("xi"), get("rho"), int(d.get("seed", 0)))


def simulate_influenza(cfg: InfluenzaConfig, n: int) -> PsaDataset:
    if n < 2:
        raise ValidationError(f"need n >= 2 draws, got {n}")
    rng = np.random.default_rng(cfg.seed)
    pi, lam, gam, xi, rho = (d.sample(rng, n) for d in cfg.dists())
    e0 = -pi * lam
    c0 = pi * gam * lam
    e1 = -pi * rho * lam
    c1 = xi + pi * rho * gam * lam
    params = np.column_stack([pi, lam, gam, xi, rho])
    return PsaDataset(params, INFLUENZA_PARAMS,
                      effects=np.column_stack([e0, e1]), costs=np.column_stack([c0, c1]))


@dataclass(frozen=True)
class GaussianModelSpec:
    """theta ~ N(mean, cov); NB_t(theta) = a_t + b_t'theta + theta'M_t theta.

    ``linear`` is (T+1) x P and ``quadratic`` (T+1) x P x P or ``None``.
    """

    mean: np.ndarray
    cov: np.ndarray
    intercepts: np.ndarray
    linear: np.ndarray
    quadratic: np.ndarray | None = None
    param_names: tuple[str, ...] = ()
    seed: int | None = None
    _chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=float).ravel()
        P = m.size
        V = np.asarray(self.cov, dtype=float).reshape(P, P)
        a = np.asarray(self.intercepts, dtype=float).ravel()
        b = np.asarray(self.linear, dtype=float).reshape(a.size, P)
        if a.size < 2:
            raise ValidationError("need at least two treatments")
        if not np.allclose(V, V.T, rtol=0, atol=1e-12 * max(1.0, np.abs(V).max())):
            raise ValidationError("covariance must be symmetric")
        try:
            chol = np.linalg.cholesky(V)
        except np.linalg.LinAlgError:
            raise NumericError("covariance is not positive definite", stage="model-spec") from None
        M = None
        if self.quadratic is not None:
            M = np.asarray(self.quadratic, dtype=float).reshape(a.size, P, P)
            if not np.allclose(M, np.swapaxes(M, 1, 2)):
                raise ValidationError("quadratic coefficient matrices must be symmetric")
            if not np.any(M):
                M = None
        names = tuple(self.param_names) or tuple(f"theta{i + 1}" for i in range(P))
        if len(names) != P:
            raise ValidationError(f"{len(names)} names for {P} parameters")
        for attr, val in (("mean", m), ("cov", V), ("intercepts", a), ("linear", b),
                          ("quadratic", M), ("param_names", names), ("_chol", chol)):
            object.__setattr__(self, attr, val)

    @property
    def P(self) -> int:
        return self.mean.size

    @property
    def T(self) -> int:
        return self.intercepts.size - 1

    def nb(self, theta: np.ndarray) -> np.ndarray:
        """Net benefits for each row of ``theta``; returns n x (T+1)."""
        th = np.atleast_2d(np.asarray(theta, dtype=float))
        out = self.intercepts + th @ self.linear.T
        if self.quadratic is not None:
            out = out + np.einsum("ni,tij,nj->nt", th, self.quadratic, th)
        return out

    def expected_nb(self) -> np.ndarray:
        out = self.intercepts + self.linear @ self.mean
        if self.quadratic is not None:
            out = out + np.einsum("i,tij,j->t", self.mean, self.quadratic, self.mean)
            out = out + np.einsum("tij,ji->t", self.quadratic, self.cov)
        return out

    def to_dict(self) -> dict:
        d = {
            "kind": "gaussian",
            "param_names": list(self.param_names),
            "mean": self.mean.tolist(),
            "cov": self.cov.tolist(),
            "intercepts": self.intercepts.tolist(),
            "linear": self.linear.tolist(),
            "quadratic": None if self.quadratic is None else self.quadratic.tolist(),
        }
        if self.seed is not None:
            d["seed"] = self.seed
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianModelSpec":
        if d.get("kind", "gaussian") != "gaussian":
            raise ValidationError(f"not a Gaussian model spec (kind={d.get('kind')!r})")
        return cls(np.array(d["mean"]), np.array(d["cov"]), np.array(d["intercepts"]),
                   np.array(d["linear"]),
                   None if d.get("quadratic") is None else np.array(d["quadratic"]),
                   tuple(d.get("param_names") or ()), d.get("seed"))

    def save(self, path: str | Path, **extra) -> None:
        Path(path).write_text(json.dumps({**self.to_dict(), **extra}, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "GaussianModelSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def simulate_gaussian_model(spec: GaussianModelSpec, n: int, seed: int) -> PsaDataset:
    if n < 2:
        raise ValidationError(f"need n >= 2 draws, got {n}")
    rng = np.random.default_rng(seed)
    theta = spec.mean + rng.standard_normal((n, spec.P)) @ spec._chol.T
    return PsaDataset(theta, spec.param_names, net_benefits=spec.nb(theta))


@dataclass(frozen=True)
class _Conditioner:
    """Gaussian conditioning of the complement on the focal block."""

    focal: np.ndarray
    rest: np.ndarray
    gain: np.ndarray        # P_psi x P_phi, V_psi,phi V_phi,phi^-1
    cond_cov: np.ndarray    # P_psi x P_psi

    @classmethod
    def build(cls, spec: GaussianModelSpec, subset: SubsetSpec) -> "_Conditioner":
        subset.check(spec.P)
        f = np.array(subset.focal)
        r = np.array(subset.complement, dtype=int)
        V = spec.cov
        try:
            cf = linalg.cho_factor(V[np.ix_(f, f)], lower=True)
        except linalg.LinAlgError:
            raise NumericError("focal covariance block is singular", stage="conditioning") from None
        gain = linalg.cho_solve(cf, V[np.ix_(f, r)]).T
        cond = V[np.ix_(r, r)] - gain @ V[np.ix_(f, r)]
        return cls(f, r, gain, 0.5 * (cond + cond.T))

    def mean_rest(self, spec: GaussianModelSpec, phi: np.ndarray) -> np.ndarray:
        return spec.mean[self.rest] + (phi - spec.mean[self.focal]) @ self.gain.T

    def assemble(self, spec: GaussianModelSpec, phi: np.ndarray, psi: np.ndarray) -> np.ndarray:
        th = np.empty((phi.shape[0], spec.P))
        th[:, self.focal] = phi
        th[:, self.rest] = psi
        return th


def conditional_expectation_nb(spec: GaussianModelSpec, subset: SubsetSpec, phi_values) -> np.ndarray:
    """E[NB_t | phi] for each treatment.

    A single focal vector gives a (T+1,) result; an n x P_phi matrix gives
    n x (T+1).
    """
    phi = np.asarray(phi_values, dtype=float)
    single = phi.ndim == 1
    phi = np.atleast_2d(phi)
    if not np.all(np.isfinite(phi)):
        raise ValidationError("focal values must be finite")
    cond = _Conditioner.build(spec, subset)
    if phi.shape[1] != cond.focal.size:
        raise ValidationError(f"expected {cond.focal.size} focal values per row, got {phi.shape[1]}")
    theta_bar = cond.assemble(spec, phi, cond.mean_rest(spec, phi))
    out = spec.nb(theta_bar)
    if spec.quadratic is not None and cond.rest.size:
        Mrr = spec.quadratic[:, cond.rest][:, :, cond.rest]
        out = out + np.einsum("tij,ji->t", Mrr, cond.cond_cov)
    return out[0] if single else out


@dataclass(frozen=True)
class OracleResult:
    value: float
    se: float
    n: int
    warnings: tuple[str, ...] = ()

    def __float__(self) -> float:
        return self.value


def _bootstrap_se(g: np.ndarray, n_boot: int, rng: np.random.Generator) -> float:
    n = g.shape[0]
    rowmax = g.max(axis=1)
    stats = np.empty(n_boot)
    for b in range(n_boot):
        idx = rng.integers(0, n, size=n)
        stats[b] = rowmax[idx].mean() - g[idx].mean(axis=0).max()
    return float(stats.std(ddof=1))


def _two_term(g: np.ndarray) -> float:
    return psa_two_term(g)


def evppi_single_loop(spec: GaussianModelSpec, subset: SubsetSpec, n: int, seed: int,
                      n_boot: int = 200, chunk: int = 200_000) -> OracleResult:
    """EVPPI from exact conditional expectations over n focal draws."""
    if n < 2:
        raise ValidationError(f"need n >= 2 draws, got {n}")
    cond = _Conditioner.build(spec, subset)
    f = cond.focal
    L = np.linalg.cholesky(spec.cov[np.ix_(f, f)])
    rng = np.random.default_rng(seed)
    g = np.empty((n, spec.T + 1))
    for start in range(0, n, chunk):
        m = min(chunk, n - start)
        phi = spec.mean[f] + rng.standard_normal((m, f.size)) @ L.T
        g[start:start + m] = conditional_expectation_nb(spec, subset, phi)
    se = _bootstrap_se(g, n_boot, np.random.default_rng([seed, 1])) if n_boot > 1 else float("nan")
    return OracleResult(_two_term(g), se, n)


def evppi_nested_mc(spec: GaussianModelSpec, subset: SubsetSpec, S_phi: int, S_psi: int, seed: int,
                    n_boot: int = 200, chunk_rows: int = 200_000) -> OracleResult:
    """Two-level Monte Carlo: inner means over psi | phi replace the conditional expectations."""
    if S_phi < 2 or S_psi < 1:
        raise ValidationError(f"need S_phi >= 2 and S_psi >= 1, got {S_phi}, {S_psi}")
    notes: tuple[str, ...] = ()
    if S_psi == 1:
        msg = "S_psi = 1: inner mean of a single draw, the estimate is biased upwards towards the EVPI"
        warnings.warn(msg, stacklevel=2)
        notes = (msg,)
    cond = _Conditioner.build(spec, subset)
    f, r = cond.focal, cond.rest
    Lf = np.linalg.cholesky(spec.cov[np.ix_(f, f)])
    Lr = np.linalg.cholesky(cond.cond_cov) if r.size else np.zeros((0, 0))
    rng = np.random.default_rng(seed)
    phi_all = spec.mean[f] + rng.standard_normal((S_phi, f.size)) @ Lf.T
    g = np.empty((S_phi, spec.T + 1))
    per = max(1, chunk_rows // S_psi)
    for start in range(0, S_phi, per):
        phi = phi_all[start:start + per]
        m = phi.shape[0]
        mu = cond.mean_rest(spec, phi)
        psi = mu[:, None, :] + rng.standard_normal((m, S_psi, r.size)) @ Lr.T
        th = cond.assemble(spec, np.repeat(phi, S_psi, axis=0), psi.reshape(m * S_psi, r.size))
        g[start:start + m] = spec.nb(th).reshape(m, S_psi, -1).mean(axis=1)
    se = _bootstrap_se(g, n_boot, np.random.default_rng([seed, 1])) if n_boot > 1 else float("nan")
    return OracleResult(_two_term(g), se, S_phi * S_psi, notes)


def model_evpi(spec: GaussianModelSpec, n: int, seed: int, n_boot: int = 200) -> OracleResult:
    return evppi_single_loop(spec, SubsetSpec.all(spec.P), n, seed, n_boot=n_boot)


def block_exchangeable_cov(sizes: Sequence[int], rho: Sequence[float], sd: np.ndarray) -> np.ndarray:
    """Covariance with exchangeable correlation ``rho[k]`` inside block k, zero across blocks."""
    P = int(sum(sizes))
    R = np.eye(P)
    start = 0
    for size, r in zip(sizes, rho):
        blk = slice(start, start + size)
        R[blk, blk] = r
        start += size
    np.fill_diagonal(R, 1.0)
    return R * np.outer(sd, sd)


def savi_like_spec(seed: int, n_params: int = 19, n_treatments: int = 3,
                   quadratic: bool = False, block_size: int = 4) -> GaussianModelSpec:
    """Random correlated Gaussian decision model.

    Parameters come in exchangeable-correlation blocks with heterogeneous
    scales.  The incremental net benefits share a common set of decision
    drivers, and ``quadratic=True`` adds a rank-one quadratic term per
    treatment.  Intercepts are chosen so every treatment has the same expected
    net benefit, which keeps the decision genuinely uncertain.
    """
    rng = np.random.default_rng(seed)
    P = n_params
    sizes = [block_size] * (P // block_size)
    if P % block_size:
        sizes.append(P % block_size)
    rho = rng.uniform(0.2, 0.6, size=len(sizes))
    sd = np.exp(rng.uniform(np.log(0.05), np.log(50.0), size=P))
    mean = sd * rng.uniform(-3.0, 3.0, size=P)
    cov = block_exchangeable_cov(sizes, rho, sd)

    # decaying importance across parameters, in sd units
    weight = 0.75 ** np.arange(P)
    rng.shuffle(weight)
    b = np.zeros((n_treatments, P))
    b[1:] = rng.normal(size=(n_treatments - 1, P)) * weight / sd
    M = None
    if quadratic:
        M = np.zeros((n_treatments, P, P))
        for t in range(1, n_treatments):
            u = rng.normal(size=P) * weight / sd
            M[t] = 0.15 * np.sign(rng.normal()) * np.outer(u, u)
    a = np.zeros(n_treatments)
    provisional = GaussianModelSpec(mean, cov, a, b, M)
    a = -provisional.expected_nb()
    a -= a[0]
    names = tuple(f"theta{i + 1}" for i in range(P))
    return GaussianModelSpec(mean, cov, a, b, M, names, seed)


def vaccine_like_spec(seed: int, quadratic: bool = True) -> GaussianModelSpec:
    """62-parameter, two-treatment stress model."""
    return savi_like_spec(seed, n_params=62, n_treatments=2, quadratic=quadratic, block_size=6)
