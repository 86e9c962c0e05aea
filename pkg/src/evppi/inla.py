"""Grid-integrated inference for a Gaussian-response latent Gaussian model.

The latent field x = (omega, beta) has sparse prior precision
blockdiag(Q_spde(kappa, tau), tau_beta I) and the data are
y = B x + eps with eps ~ N(0, I / prec_eps).  With a Gaussian likelihood the
conditional posterior of x given the hyperparameters is Gaussian, so the
Laplace step is exact and the marginal likelihood is available in closed
form.  The hyperparameters lambda = (log kappa, log tau, log prec_eps) are
integrated numerically on a grid laid out in Hessian-standardized
coordinates around the posterior mode.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy import optimize

from .errors import NumericError, ValidationError
from .fem import SpdeOperator, spde_structure
from .sparse import SpdFactor

LOG_2PI = math.log(2.0 * math.pi)
# (log kappa, log tau, log prec_eps) box for a unit-variance response on standardized coordinates
DEFAULT_BOUNDS = ((-6.0, 6.0), (-12.0, 12.0), (-8.0, 14.0))
# nodes whose log-density drop equals the threshold up to rounding count as inside
THRESHOLD_TOL = 1e-6


@dataclass(frozen=True)
class LatentModel:
    y: np.ndarray
    B: sp.csr_matrix
    Q_prior: sp.csc_matrix
    prec_eps: float
    hyper: tuple[float, ...] = ()

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        B = sp.csr_matrix(self.B)
        Q = sp.csc_matrix(self.Q_prior)
        if B.shape != (y.size, Q.shape[0]) or Q.shape[0] != Q.shape[1]:
            raise ValidationError(f"shape mismatch: y {y.shape}, B {B.shape}, Q_prior {Q.shape}")
        if not self.prec_eps > 0:
            raise ValidationError("observation precision must be positive")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "Q_prior", Q)


@dataclass(frozen=True)
class GmrfPosterior:
    mean: np.ndarray
    factor: SpdFactor
    logdet_prior: float
    logdet_post: float


def gmrf_conditional(model: LatentModel, logdet_prior: float | None = None,
                     BtB: sp.spmatrix | None = None) -> GmrfPosterior:
    """Posterior of the latent field given the hyperparameters.

    ``logdet_prior`` and ``BtB`` may be passed in when the caller already has
    them; they are otherwise computed here.
    """
    ctx = {"hyper": model.hyper}
    if logdet_prior is None:
        logdet_prior = SpdFactor(model.Q_prior, stage="prior", **ctx).logdet
    if BtB is None:
        BtB = model.B.T @ model.B
    Q_post = sp.csc_matrix(model.Q_prior + model.prec_eps * BtB)
    factor = SpdFactor(Q_post, stage="posterior", **ctx)
    mean = factor.solve(model.prec_eps * (model.B.T @ model.y))
    return GmrfPosterior(mean, factor, float(logdet_prior), factor.logdet)


def log_marginal_likelihood(model: LatentModel, post: GmrfPosterior | None = None) -> float:
    post = post or gmrf_conditional(model)
    S = model.y.size
    p = model.prec_eps
    b = p * (model.B.T @ model.y)
    return float(0.5 * post.logdet_prior - 0.5 * post.logdet_post + 0.5 * S * math.log(p)
                 - 0.5 * S * LOG_2PI - 0.5 * p * (model.y @ model.y) + 0.5 * (post.mean @ b))


@dataclass(frozen=True)
class HyperPrior:
    """log kappa, log tau ~ N(0, sd^2); prec_eps ~ Gamma(shape, rate)."""

    log_kappa_sd: float = 10.0
    log_tau_sd: float = 10.0
    prec_shape: float = 1.0
    prec_rate: float = 5e-5

    def log_density(self, lam: Sequence[float]) -> float:
        lk, lt, lp = lam
        out = -0.5 * (lk / self.log_kappa_sd) ** 2 - math.log(self.log_kappa_sd) - 0.5 * LOG_2PI
        out += -0.5 * (lt / self.log_tau_sd) ** 2 - math.log(self.log_tau_sd) - 0.5 * LOG_2PI
        # Gamma on the precision, expressed in log-precision (Jacobian included)
        a, r = self.prec_shape, self.prec_rate
        out += a * math.log(r) - math.lgamma(a) + a * lp - r * math.exp(lp)
        return out

    def to_dict(self) -> dict:
        return {"log_kappa": {"normal_sd": self.log_kappa_sd}, "log_tau": {"normal_sd": self.log_tau_sd},
                "prec_eps": {"gamma_shape": self.prec_shape, "gamma_rate": self.prec_rate}}


class SpdeRegression:
    """y = A omega + H beta + eps with an SPDE prior on omega.

    Evaluates the log posterior of lambda and keeps the latent posterior
    means of every evaluated node so grid integration does not refactor.
    """

    def __init__(self, y, op: SpdeOperator, A, H, prior: HyperPrior | None = None,
                 beta_prec: float = 1e-6, bounds: Sequence[tuple[float, float]] = DEFAULT_BOUNDS):
        self.y = np.asarray(y, dtype=float).ravel()
        self.op = op
        self.A = sp.csr_matrix(A)
        self.H = np.asarray(H, dtype=float)
        self.prior = prior or HyperPrior()
        self.beta_prec = float(beta_prec)
        self.bounds = tuple((float(lo), float(hi)) for lo, hi in bounds)
        self._values: dict[tuple, float] = {}
        self.B = sp.csr_matrix(sp.hstack([self.A, sp.csr_matrix(self.H)]))
        self.BtB = sp.csc_matrix(self.B.T @ self.B)
        self.Bty = self.B.T @ self.y
        self.V = op.n
        self.q = self.H.shape[1]
        self._struct_logdet: dict[float, float] = {}
        self._logdet_c = float(np.sum(np.log(op.C.diagonal())))
        self._means: dict[tuple, np.ndarray] = {}
        self.n_evals = 0

    def prior_precision(self, kappa: float, tau: float) -> sp.csc_matrix:
        Qs = (tau * tau) * spde_structure(self.op, kappa)
        return sp.csc_matrix(sp.block_diag([Qs, self.beta_prec * sp.identity(self.q)]))

    def model(self, lam: Sequence[float]) -> LatentModel:
        lk, lt, lp = self.clip(lam)
        return LatentModel(self.y, self.B, self.prior_precision(math.exp(lk), math.exp(lt)),
                           math.exp(lp), (lk, lt, lp))

    def _logdet_prior(self, lk: float, lt: float) -> float:
        if lk not in self._struct_logdet:
            # kappa^4 C + 2 kappa^2 G + G C^-1 G = K C^-1 K with K = kappa^2 C + G
            kappa = math.exp(lk)
            K = sp.csc_matrix(kappa * kappa * self.op.C + self.op.G)
            logdet_k = SpdFactor(K, stage="prior", kappa=kappa).logdet
            self._struct_logdet[lk] = 2.0 * logdet_k - self._logdet_c
        return self._struct_logdet[lk] + 2.0 * self.V * lt + self.q * math.log(self.beta_prec)

    def posterior(self, lam: Sequence[float]) -> GmrfPosterior:
        m = self.model(lam)
        lk, lt, _ = m.hyper
        return gmrf_conditional(m, self._logdet_prior(lk, lt), self.BtB)

    def clip(self, lam: Sequence[float]) -> tuple[float, ...]:
        return tuple(min(max(float(v), lo), hi) for v, (lo, hi) in zip(lam, self.bounds))

    def log_posterior(self, lam: Sequence[float]) -> float:
        """Log posterior of lambda up to a constant.

        Outside ``bounds`` the value at the nearest in-box point is used with a
        steep quadratic penalty, so modes that run off to infinity (an exact
        fit, a vanishing field) settle just beyond the box edge with a finite
        Hessian.
        """
        lam = tuple(float(v) for v in lam)
        if not all(math.isfinite(v) for v in lam):
            return -math.inf
        inside = self.clip(lam)
        penalty = 0.5 * sum(((a - b) / 0.05) ** 2 for a, b in zip(lam, inside))
        if inside in self._values:
            return self._values[inside] - penalty
        self.n_evals += 1
        try:
            m = self.model(inside)
            post = gmrf_conditional(m, self._logdet_prior(inside[0], inside[1]), self.BtB)
        except NumericError:
            return -math.inf
        self._means[inside] = post.mean
        self._values[inside] = log_marginal_likelihood(m, post) + self.prior.log_density(inside)
        return self._values[inside] - penalty

    def latent_mean(self, lam: Sequence[float]) -> np.ndarray:
        key = self.clip(lam)
        if key not in self._means:
            self._means[key] = self.posterior(key).mean
        return self._means[key]


@dataclass(frozen=True)
class GridConfig:
    step: float = 1.0
    threshold: float = 2.5
    fd_step: float = 1e-3
    max_axis_steps: int = 4
    maxiter: int = 300
    xatol: float = 1e-2
    fatol: float = 1e-3
    min_curvature: float = 0.25


@dataclass(frozen=True)
class HyperGrid:
    nodes: np.ndarray           # n x k, hyperparameter coordinates
    z: np.ndarray               # n x k, standardized coordinates
    log_density: np.ndarray
    weights: np.ndarray
    mode: np.ndarray
    mode_log_density: float
    hessian_factor: np.ndarray  # lambda = mode + hessian_factor @ z
    skipped: list = field(default_factory=list)
    n_evaluations: int = 0

    def __post_init__(self):
        w = self.weights
        if np.any(w < 0) or not math.isclose(float(w.sum()), 1.0, rel_tol=1e-12):
            raise ValidationError("grid weights must be non-negative and sum to one")

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    def to_dict(self) -> dict:
        return {"nodes": self.n_nodes, "mode": self.mode.tolist(),
                "mode_log_density": self.mode_log_density,
                "points": self.nodes.tolist(), "log_density": self.log_density.tolist(),
                "weights": self.weights.tolist(), "skipped": len(self.skipped),
                "evaluations": self.n_evaluations}


def _fd_hessian(f: Callable[[np.ndarray], float], x: np.ndarray, h: float) -> np.ndarray:
    k = x.size
    Hm = np.empty((k, k))
    f0 = f(x)
    E = np.eye(k) * h
    for i in range(k):
        Hm[i, i] = (f(x + E[i]) - 2.0 * f0 + f(x - E[i])) / (h * h)
        for j in range(i):
            val = (f(x + E[i] + E[j]) - f(x + E[i] - E[j]) - f(x - E[i] + E[j]) + f(x - E[i] - E[j])) / (4 * h * h)
            Hm[i, j] = Hm[j, i] = val
    return Hm


def _find_mode(neg: Callable, start: np.ndarray, cfg: GridConfig) -> np.ndarray:
    res = optimize.minimize(neg, start, method="Nelder-Mead",
                            options={"maxiter": cfg.maxiter, "xatol": cfg.xatol, "fatol": cfg.fatol,
                                     "initial_simplex": start + np.vstack([np.zeros(start.size), np.eye(start.size)])})
    return np.asarray(res.x, dtype=float)


def explore_hyper_grid(objective: Callable[[np.ndarray], float], start, cfg: GridConfig | None = None) -> HyperGrid:
    """Mode search, Hessian standardization, axis stepping and Cartesian fill-in."""
    cfg = cfg or GridConfig()
    start = np.asarray(start, dtype=float)
    if not math.isfinite(objective(start)):
        raise NumericError("log posterior is not finite at the starting point", stage="grid",
                           start=start.tolist())
    cache: dict[tuple, float] = {}
    skipped: list = []

    def f(x: np.ndarray) -> float:
        key = tuple(np.round(x, 12))
        if key not in cache:
            val = float(objective(np.asarray(key)))
            cache[key] = val if math.isfinite(val) else -math.inf
        return cache[key]

    def neg(x):
        v = f(x)
        return -v if math.isfinite(v) else 1e300

    mode = _find_mode(neg, start, cfg)
    for _ in range(3):
        Hn = -_fd_hessian(f, mode, cfg.fd_step)
        if not np.all(np.isfinite(Hn)):
            raise NumericError("non-finite Hessian at the mode", stage="grid", mode=mode.tolist())
        # one Newton step from the simplex optimum; the gradient reuses the Hessian's evaluations
        E = np.eye(mode.size) * cfg.fd_step
        grad = np.array([(f(mode + e) - f(mode - e)) / (2 * cfg.fd_step) for e in E])
        if np.all(np.linalg.eigvalsh(0.5 * (Hn + Hn.T)) > 0):
            step = np.linalg.solve(Hn, grad)
            if np.sqrt(step @ Hn @ step) < 1.0 and f(mode + step) > f(mode):
                mode = mode + step
                Hn = -_fd_hessian(f, mode, cfg.fd_step)
                if not np.all(np.isfinite(Hn)):
                    raise NumericError("non-finite Hessian at the mode", stage="grid", mode=mode.tolist())
        evals, evecs = np.linalg.eigh(0.5 * (Hn + Hn.T))
        evals = np.maximum(evals, cfg.min_curvature)
        factor = evecs / np.sqrt(evals)
        f_mode = f(mode)

        def at(zv):
            return mode + factor @ zv

        k = mode.size
        axis_pts: list[list[float]] = []
        for i in range(k):
            kept = [0.0]
            for sign in (1.0, -1.0):
                for n in range(1, cfg.max_axis_steps + 1):
                    zv = np.zeros(k)
                    zv[i] = sign * n * cfg.step
                    val = f(at(zv))
                    if not math.isfinite(val):
                        skipped.append(at(zv).tolist())
                        break
                    if f_mode - val > cfg.threshold + THRESHOLD_TOL:
                        break
                    kept.append(sign * n * cfg.step)
            axis_pts.append(sorted(kept))
        zs, lds = [], []
        for combo in itertools.product(*axis_pts):
            zv = np.array(combo)
            val = f(at(zv))
            if not math.isfinite(val):
                skipped.append(at(zv).tolist())
                continue
            if f_mode - val <= cfg.threshold + THRESHOLD_TOL or not np.any(zv):
                zs.append(zv)
                lds.append(val)
        lds_arr = np.array(lds)
        best = int(np.argmax(lds_arr))
        if lds_arr[best] <= f_mode + 1e-9:
            break
        # the optimizer stopped short of the mode: recentre on the better node
        mode = at(zs[best])
    z = np.array(zs)
    w = np.exp(lds_arr - lds_arr.max())
    w /= w.sum()
    nodes = mode + z @ factor.T
    return HyperGrid(nodes, z, lds_arr, w, mode, float(f_mode), factor, skipped, len(cache))


@dataclass(frozen=True)
class FittedField:
    mean: np.ndarray
    sd: np.ndarray | None
    node_means: np.ndarray


def fitted_field(models: Sequence[LatentModel], grid: HyperGrid,
                 latent_means: Sequence[np.ndarray] | None = None,
                 sd_nodes: str = "mode") -> FittedField:
    """Grid-weighted fitted values B mu_post and pointwise posterior sd.

    ``sd_nodes`` chooses where the within-node conditional variance is
    computed: ``"all"`` nodes, only the ``"mode"`` (used for every node), or
    ``"none"`` to skip the sd.
    """
    if len(models) != grid.n_nodes:
        raise ValidationError(f"{len(models)} models for {grid.n_nodes} grid nodes")
    if latent_means is None:
        latent_means = [gmrf_conditional(m).mean for m in models]
    node_means = np.column_stack([m.B @ mu for m, mu in zip(models, latent_means)])
    w = grid.weights
    mean = node_means @ w
    sd = None
    if sd_nodes != "none":
        if sd_nodes == "all":
            within = np.column_stack([gmrf_conditional(m).factor.quad_diag(m.B) for m in models]) @ w
        elif sd_nodes == "mode":
            j = int(np.argmax(w))
            within = gmrf_conditional(models[j]).factor.quad_diag(models[j].B)
        else:
            raise ValidationError(f"sd_nodes must be 'all', 'mode' or 'none', got {sd_nodes!r}")
        between = (node_means ** 2) @ w - mean ** 2
        sd = np.sqrt(np.maximum(within + between, 0.0))
    return FittedField(mean, sd, node_means)
