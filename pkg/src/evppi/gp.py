"""Dense Gaussian-process regression baseline for EVPPI.

Each incremental net benefit is modelled as y = H beta + f(phi) + eps with a
squared-exponential GP f.  beta (flat prior) and the GP variance (scale
invariant prior) are integrated out, leaving a profile objective in the
smoothness lengths and the nugget-to-signal ratio that is minimized by a
simplex search on a subsample.  Fitted values then use every row.
"""

from __future__ import annotations

import dataclasses
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize
from scipy.spatial.distance import cdist

from . import psa
from .errors import CollinearityError, ConfigError, DomainError, EvppiError, InsufficientDataError, NumericError
from .estimate import EvppiEstimate, TreatmentFit, residual_diagnostics

JITTER_START = 1e-10
JITTER_MAX = 1e-6
SNAP = 1e-9
# box for (log delta, log nugget ratio); outside it the objective gets a steep quadratic wall
LOG_DELTA_BOUNDS = (-7.0, 7.0)
LOG_RATIO_BOUNDS = (-18.0, 12.0)


@dataclass(frozen=True)
class GpHyper:
    delta: np.ndarray
    sigma2: float
    nugget: float
    beta: np.ndarray
    converged: bool = True
    restarted: bool = False
    objective: float = float("nan")
    jitter: float = 0.0
    n_hyp: int = 0
    iterations: int = 0

    def __post_init__(self):
        delta = np.atleast_1d(np.asarray(self.delta, dtype=float))
        if not np.all(delta > 0):
            raise DomainError("smoothness lengths must be positive")
        if not self.sigma2 > 0:
            raise DomainError("GP variance must be positive")
        if not self.nugget >= 0:
            raise DomainError("nugget variance must be non-negative")
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))

    @property
    def n_free(self) -> int:
        """beta, delta, sigma2 and nugget: 2 P + 3 for P focal parameters."""
        return self.beta.size + self.delta.size + 2

    @property
    def nugget_ratio(self) -> float:
        return self.nugget / self.sigma2

    def to_dict(self) -> dict:
        return {"delta": self.delta.tolist(), "sigma2": self.sigma2, "nugget": self.nugget,
                "nugget_ratio": self.nugget_ratio, "beta": self.beta.tolist(),
                "converged": self.converged, "restarted": self.restarted,
                "objective": self.objective, "jitter": self.jitter, "n_hyp": self.n_hyp,
                "iterations": self.iterations}


def design_matrix(points, names=None) -> np.ndarray:
    """[1 | points] with a rank check that names the offending columns."""
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    H = np.column_stack([np.ones(X.shape[0]), X])
    sv = np.linalg.svd(H, compute_uv=False)
    if sv[-1] <= 1e-10 * sv[0] * math.sqrt(H.shape[0]):
        names = list(names) if names is not None else [f"col{j}" for j in range(X.shape[1])]
        bad = []
        for j in range(1, H.shape[1]):
            others = np.delete(H, j, axis=1)
            coef, *_ = np.linalg.lstsq(others, H[:, j], rcond=None)
            if np.linalg.norm(H[:, j] - others @ coef) <= 1e-8 * max(np.linalg.norm(H[:, j]), 1.0):
                bad.append(names[j - 1])
        raise CollinearityError(f"design matrix is rank deficient; collinear columns: {bad}")
    return H


def exp_cov(points, delta, sigma2: float, other=None) -> np.ndarray:
    """sigma2 * exp(-sum_p ((a_p - b_p) / delta_p)^2) between rows of ``points`` and ``other``."""
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    delta = np.broadcast_to(np.asarray(delta, dtype=float), (X.shape[1],))
    if not np.all(delta > 0):
        raise DomainError("smoothness lengths must be positive")
    if not sigma2 > 0:
        raise DomainError("GP variance must be positive")
    A = X / delta
    if other is None:
        d2 = cdist(A, A, "sqeuclidean")
        np.fill_diagonal(d2, 0.0)
    else:
        Y = np.asarray(other, dtype=float)
        d2 = cdist(A, (Y[:, None] if Y.ndim == 1 else Y) / delta, "sqeuclidean")
    return sigma2 * np.exp(-d2)


def _cholesky(K: np.ndarray, scale: float, stage: str) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of K, adding jitter * scale to the diagonal when needed."""
    jitter = 0.0
    while True:
        try:
            if jitter:
                L = linalg.cholesky(K + jitter * scale * np.eye(K.shape[0]), lower=True, check_finite=False)
            else:
                L = linalg.cholesky(K, lower=True, check_finite=False)
            return L, jitter
        except linalg.LinAlgError:
            jitter = JITTER_START if jitter == 0.0 else jitter * 10.0
            if jitter > JITTER_MAX * (1 + 1e-9):
                raise NumericError(f"covariance is not positive definite even with jitter {JITTER_MAX:g}",
                                   stage=stage, size=K.shape[0]) from None


@dataclass(frozen=True)
class _Profile:
    value: float
    beta: np.ndarray
    sigma2: float
    jitter: float


def _profile(log_delta, log_ratio: float, y, H, points) -> _Profile:
    y = np.asarray(y, dtype=float)
    S, q = H.shape
    if S <= q:
        raise InsufficientDataError(f"need more rows than regression coefficients ({S} <= {q})")
    K = exp_cov(points, np.exp(log_delta), 1.0)
    K[np.diag_indices_from(K)] += math.exp(log_ratio)
    L, jitter = _cholesky(K, 1.0, "gp")
    Ly = linalg.solve_triangular(L, y, lower=True, check_finite=False)
    LH = linalg.solve_triangular(L, H, lower=True, check_finite=False)
    M = LH.T @ LH
    try:
        Lm = linalg.cholesky(M, lower=True)
    except linalg.LinAlgError:
        raise NumericError("H^T K^-1 H is singular", stage="gp") from None
    beta = linalg.cho_solve((Lm, True), LH.T @ Ly)
    r = Ly - LH @ beta
    sigma2 = float(r @ r) / (S - q)
    logdet_k = 2.0 * float(np.sum(np.log(np.diag(L))))
    logdet_m = 2.0 * float(np.sum(np.log(np.diag(Lm))))
    if sigma2 <= 0:
        value = -math.inf
    else:
        value = 0.5 * ((S - q) * math.log(sigma2) + logdet_k + logdet_m)
    return _Profile(value, beta, sigma2, jitter)


def profile_neg_log_marginal(log_delta, log_nugget_ratio: float, y, H, points) -> float:
    """Negative log marginal posterior of (delta, nugget ratio), up to a constant.

    With K = R(delta) + ratio * I, beta_hat the GLS coefficient and
    sigma2_hat = (y - H beta_hat)^T K^-1 (y - H beta_hat) / (S - q), the value is
    0.5 [(S - q) log sigma2_hat + log|K| + log|H^T K^-1 H|].
    """
    return _profile(np.asarray(log_delta, dtype=float), float(log_nugget_ratio), y, H, points).value


def _penalized(theta: np.ndarray, y, H, points) -> float:
    lo = np.array([LOG_DELTA_BOUNDS[0]] * (theta.size - 1) + [LOG_RATIO_BOUNDS[0]])
    hi = np.array([LOG_DELTA_BOUNDS[1]] * (theta.size - 1) + [LOG_RATIO_BOUNDS[1]])
    inside = np.clip(theta, lo, hi)
    wall = 0.5 * float(np.sum(((theta - inside) / 0.05) ** 2))
    try:
        return profile_neg_log_marginal(inside[:-1], inside[-1], y, H, points) + wall
    except NumericError:
        return math.inf


def optimize_hyperparams(y, H, points, n_hyp: int | None = None, seed: int = 0,
                         maxiter: int = 500) -> GpHyper:
    """Simplex search over (log delta, log nugget ratio) on a seeded subsample.

    The search starts at log delta = 0.5 log P and nugget ratio 0.5 and is
    restarted once from a perturbed start if the iteration cap is hit.
    sigma2 and beta are re-estimated on all rows at the optimum.
    """
    y = np.asarray(y, dtype=float).ravel()
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    H = np.asarray(H, dtype=float)
    S, P = X.shape
    n_hyp = min(500, S) if n_hyp is None else int(n_hyp)
    if not H.shape[1] < n_hyp <= S:
        raise ConfigError(f"hyperparameter subsample must satisfy q < n_hyp <= S, got {n_hyp}")
    rng = np.random.default_rng(seed)
    rows = np.sort(rng.permutation(S)[:n_hyp])
    ys, Hs, Xs = y[rows], H[rows], X[rows]

    def fun(theta):
        return _penalized(theta, ys, Hs, Xs)

    start = np.append(np.full(P, 0.5 * math.log(P)) if P > 1 else np.zeros(P), math.log(0.5))
    opts = {"maxiter": maxiter, "maxfev": 4 * maxiter, "xatol": 1e-3, "fatol": 1e-5}
    res = optimize.minimize(fun, start, method="Nelder-Mead", options=opts)
    iterations = int(res.nit)
    restarted = False
    if not res.success:
        restarted = True
        res2 = optimize.minimize(fun, res.x + rng.normal(0.0, 0.5, size=res.x.size),
                                 method="Nelder-Mead", options=opts)
        iterations += int(res2.nit)
        converged = bool(res2.success)
        if res2.fun < res.fun:
            res = res2
    else:
        converged = True
    if not converged:
        warnings.warn("GP hyperparameter search did not converge; using the best point found", stacklevel=2)
    theta = np.clip(res.x, [LOG_DELTA_BOUNDS[0]] * P + [LOG_RATIO_BOUNDS[0]],
                    [LOG_DELTA_BOUNDS[1]] * P + [LOG_RATIO_BOUNDS[1]])
    full = _profile(theta[:-1], theta[-1], y, H, X)
    sigma2 = max(full.sigma2, 1e-300)
    return GpHyper(np.exp(theta[:-1]), sigma2, sigma2 * math.exp(theta[-1]), full.beta,
                   converged, restarted, float(res.fun), full.jitter, n_hyp, iterations)


def gp_fitted_values(y, H, points, hyper: GpHyper) -> np.ndarray:
    """g_hat = H beta_hat + C (C + nugget I)^-1 (y - H beta_hat) on every row.

    beta_hat is the GLS coefficient for ``y`` under the covariance in
    ``hyper``, so a multiple of a design column added to y passes straight
    through to the fitted values.
    """
    y = np.asarray(y, dtype=float).ravel()
    H = np.asarray(H, dtype=float)
    C = exp_cov(points, hyper.delta, hyper.sigma2)
    K = C.copy()
    K[np.diag_indices_from(K)] += hyper.nugget
    L, jitter = _cholesky(K, hyper.sigma2, "gp")
    KiH = linalg.cho_solve((L, True), H, check_finite=False)
    Kiy = linalg.cho_solve((L, True), y, check_finite=False)
    beta = np.linalg.solve(H.T @ KiH, H.T @ Kiy)
    alpha = Kiy - KiH @ beta
    # C K^-1 r = r - (nugget + jitter) K^-1 r, so g_hat = y - (nugget + jitter) alpha
    return y - (hyper.nugget + jitter * hyper.sigma2) * alpha


@dataclass(frozen=True)
class GpConfig:
    n_hyp: int | None = None
    maxiter: int = 500
    seed: int = 0
    alpha: float = 0.01
    threads: int = 1

    def __post_init__(self):
        if self.maxiter < 1:
            raise ConfigError("maxiter must be positive")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _fit_treatment(t: int, X: np.ndarray, H: np.ndarray, y: np.ndarray, cfg: GpConfig) -> TreatmentFit:
    scale = max(np.abs(y).max(), 1.0)
    y_sd = y.std(ddof=1)
    if not y_sd > 1e-12 * scale:
        return TreatmentFit(t, y.copy(), y.copy(), None, 0.0,
                            {"must_check_residuals": False, "zero_signal": True})
    ys = (y - y.mean()) / y_sd
    try:
        hyper = optimize_hyperparams(ys, H, X, cfg.n_hyp, cfg.seed, cfg.maxiter)
        fitted_s = gp_fitted_values(ys, H, X, hyper)
    except EvppiError as exc:
        if exc.stage is None:
            exc.stage = "gp"
        raise
    fitted = y.mean() + y_sd * fitted_s
    diag = residual_diagnostics(fitted, y, cfg.alpha)
    info = {
        "must_check_residuals": bool(diag.flags.get("runs", False)),
        "gp": {**hyper.to_dict(), "response_scale": float(y_sd), "response_center": float(y.mean())},
    }
    return TreatmentFit(t, fitted, y.copy(), diag, float(np.std(y - fitted, ddof=1)), info)


def evppi_gp(ds: psa.PsaDataset, subset, k: float = 20000.0, config: GpConfig | None = None,
             seed: int | None = None) -> EvppiEstimate:
    """EVPPI of ``subset`` by exact GP regression of each incremental net benefit."""
    cfg = config or GpConfig()
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=int(seed))
    t0 = time.perf_counter()
    sub = ds.subset(subset)
    q = len(sub.focal) + 1
    if ds.S < 3 * q:
        raise InsufficientDataError(f"GP regression needs S >= 3(P_focal + 1) = {3 * q} rows, got {ds.S}",
                                    stage="subset")
    names = [ds.param_names[i] for i in sub.focal]
    X, _ = psa.rescale_columns(ds.params[:, list(sub.focal)], names)
    X = np.round(X / SNAP) * SNAP
    H = design_matrix(X, names)
    nb = psa.net_benefit(ds, k)
    notes = list(nb.warnings)
    inc = psa.incremental_net_benefit(nb)

    jobs = range(1, inc.T + 1)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        if cfg.threads > 1 and inc.T > 1:
            with ThreadPoolExecutor(cfg.threads) as pool:
                fits = list(pool.map(lambda t: _fit_treatment(t, X, H, inc.nb[:, t], cfg), jobs))
        else:
            fits = [_fit_treatment(t, X, H, inc.nb[:, t], cfg) for t in jobs]
    notes.extend(str(w.message) for w in caught)

    fitted = np.zeros_like(inc.nb)
    for f in fits:
        fitted[:, f.treatment] = f.fitted
        if f.info.get("zero_signal"):
            notes.append(f"treatment {f.treatment}: incremental net benefit is constant, no fit needed")
    surfaces = psa.FittedSurfaces(fitted, np.array([0.0] + [f.residual_sd for f in fits]))
    return EvppiEstimate(
        value=psa.evppi_from_fitted(surfaces), method="gp", evpi=psa.evpi_mc(nb), wtp=nb.wtp,
        subset=names, seed=cfg.seed, timing_s=time.perf_counter() - t0, fitted=fitted,
        observed=inc.nb, treatments=fits, warnings=notes, config=cfg.to_dict(),
    )
