"""Fast EVPPI: inverse-regression projection to 2-D, then an SPDE field fit.

For each non-reference treatment the incremental net benefit is regressed
on a two-dimensional sufficient reduction of the focal parameters.  The
regression is a Matern field on a triangulation of the projected points
plus polynomial fixed effects, with its hyperparameters integrated on a
grid.  The fitted values feed the usual two-term EVPPI estimator.
"""

from __future__ import annotations

import dataclasses
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import psa
from .errors import CollinearityError, ConfigError, EvppiError, ValidationError
from .estimate import EvppiEstimate, TreatmentFit, residual_diagnostics
from .fem import fem_matrices, matern_range
from .inla import GridConfig, HyperPrior, SpdeRegression, explore_hyper_grid, fitted_field
from .mesh import MeshConfig, build_mesh, projector
from .pfc import project, select_pfc

MIN_ROWS = 50
SNAP = 1e-9


@dataclass(frozen=True)
class EngineConfig:
    interaction_order: int = 1
    d_max: int = 4
    h_max: int = 4
    whiten: bool = True
    mesh: MeshConfig = field(default_factory=MeshConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    prior: HyperPrior = field(default_factory=HyperPrior)
    beta_prec: float = 1e-6
    sd_nodes: str = "mode"
    alpha: float = 0.01
    threads: int = 1

    def __post_init__(self):
        if self.interaction_order not in (1, 2, 3):
            raise ConfigError(f"interaction order must be 1, 2 or 3, got {self.interaction_order}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def build_design(projection, order: int = 1) -> np.ndarray:
    """Intercept plus all monomials of the two coordinates up to total degree ``order``.

    Non-intercept columns are standardized.
    """
    if order not in (1, 2, 3):
        raise ConfigError(f"interaction order must be 1, 2 or 3, got {order}")
    z = np.asarray(projection, dtype=float)
    if z.ndim != 2 or z.shape[1] != 2:
        raise ValidationError(f"projection must be S x 2, got shape {z.shape}")
    z1, z2 = z[:, 0], z[:, 1]
    cols, names = [], []
    for deg in range(1, order + 1):
        for p1 in range(deg, -1, -1):
            cols.append(z1 ** p1 * z2 ** (deg - p1))
            names.append(f"z1^{p1}*z2^{deg - p1}")
    X = np.column_stack(cols)
    sd = X.std(axis=0, ddof=1)
    bad = [names[j] for j in np.flatnonzero(~(sd > 1e-12 * np.maximum(np.abs(X).max(axis=0), 1.0)))]
    if bad:
        raise CollinearityError(f"constant design columns: {bad}")
    H = np.column_stack([np.ones(z.shape[0]), (X - X.mean(axis=0)) / sd])
    sv = np.linalg.svd(H, compute_uv=False)
    if sv[-1] <= 1e-8 * sv[0]:
        raise CollinearityError(f"design matrix is rank deficient (columns {['1'] + names})")
    return H


def whiten_columns(X: np.ndarray, names) -> np.ndarray:
    """Decorrelate standardized columns so the sample covariance is the identity."""
    R = np.cov(X, rowvar=False, ddof=1).reshape(X.shape[1], X.shape[1])
    try:
        L = np.linalg.cholesky(R)
    except np.linalg.LinAlgError:
        raise CollinearityError(f"focal columns {list(names)} are collinear") from None
    if np.min(np.diag(L)) < 1e-7:
        j = int(np.argmin(np.diag(L)))
        raise CollinearityError(f"focal column {names[j]!r} is (nearly) a linear combination of the others")
    return np.linalg.solve(L, X.T).T


def _start(points: np.ndarray) -> np.ndarray:
    diag = float(np.hypot(*(points.max(axis=0) - points.min(axis=0))))
    kappa = math.sqrt(8.0) / (0.3 * diag)
    sigma2 = 0.25
    tau = 1.0 / math.sqrt(4.0 * math.pi * kappa ** 2 * sigma2)
    return np.array([math.log(kappa), math.log(tau), math.log(4.0)])


def _fit_treatment(t: int, X: np.ndarray, y: np.ndarray, cfg: EngineConfig) -> TreatmentFit:
    scale = max(np.abs(y).max(), 1.0)
    y_sd = y.std(ddof=1)
    if not y_sd > 1e-12 * scale:
        return TreatmentFit(t, y.copy(), y.copy(), None, 0.0,
                            {"must_check_residuals": False, "zero_signal": True})
    ys = (y - y.mean()) / y_sd

    stage = "pfc"
    try:
        sel = select_pfc(X, ys, cfg.d_max, cfg.h_max)
        z, _ = project(sel.model, X)
        z = np.round(z / SNAP) * SNAP
        stage = "mesh"
        mesh = build_mesh(z, cfg.mesh)
        op = fem_matrices(mesh)
        A = projector(mesh, z).A
        stage = "design"
        H = build_design(z, cfg.interaction_order)
        stage = "inference"
        reg = SpdeRegression(ys, op, A, H, cfg.prior, cfg.beta_prec)
        grid = explore_hyper_grid(reg.log_posterior, _start(z), cfg.grid)
        models = [reg.model(lam) for lam in grid.nodes]
        means = [reg.latent_mean(lam) for lam in grid.nodes]
        field_ = fitted_field(models, grid, means, cfg.sd_nodes)
    except EvppiError as exc:
        if exc.stage is None:
            exc.stage = stage
        raise

    fitted = y.mean() + y_sd * field_.mean
    diag = residual_diagnostics(fitted, y, cfg.alpha)
    resid_sd = float(np.std(y - fitted, ddof=1))
    must_check = sel.d_exceeds_2 or diag.flags.get("runs", False)
    kappa = math.exp(grid.mode[0])
    info = {
        "must_check_residuals": bool(must_check),
        "pfc": {"d": sel.aic_d, "h": sel.model.h, "d_used": 2,
                "aic_table": [r.to_dict() for r in sel.table]},
        "mesh": {**mesh.stats(), "max_inner_edge": _max_inner_edge(mesh)},
        "grid": {**grid.to_dict(), "mode_range": matern_range(kappa),
                 "prior": cfg.prior.to_dict(), "evaluations": reg.n_evals},
    }
    plot = {
        "projection": z.tolist(),
        "mesh_vertices": mesh.vertices.tolist(),
        "mesh_triangles": mesh.triangles.tolist(),
        "fitted_sd": None if field_.sd is None else (y_sd * field_.sd).tolist(),
    }
    return TreatmentFit(t, fitted, y.copy(), diag, resid_sd, info, plot)


def _max_inner_edge(mesh) -> float:
    e = mesh.edges()
    inner = (mesh.vertex_zone[e[:, 0]] == 0) & (mesh.vertex_zone[e[:, 1]] == 0)
    lengths = np.linalg.norm(mesh.vertices[e[inner, 0]] - mesh.vertices[e[inner, 1]], axis=1)
    return float(lengths.max()) if lengths.size else 0.0


def focal_matrix(ds: psa.PsaDataset, subset: psa.SubsetSpec, whiten: bool = True) -> np.ndarray:
    names = [ds.param_names[i] for i in subset.focal]
    X, _ = psa.rescale_columns(ds.params[:, list(subset.focal)], names)
    return whiten_columns(X, names) if whiten and X.shape[1] > 1 else X


def evppi_spde(ds: psa.PsaDataset, subset, k: float = 20000.0,
               config: EngineConfig | None = None, seed: int | None = None) -> EvppiEstimate:
    """EVPPI of ``subset`` via projection + SPDE regression.

    The pipeline uses no random numbers; ``seed`` is only echoed in the
    report.
    """
    cfg = config or EngineConfig()
    t0 = time.perf_counter()
    sub = ds.subset(subset)
    notes: list[str] = []
    if ds.S < MIN_ROWS:
        notes.append(f"only {ds.S} PSA rows; the regression estimate is unreliable below {MIN_ROWS}, "
                     "consider a Monte Carlo oracle")
        warnings.warn(notes[-1], stacklevel=2)
    if len(sub.focal) < 2:
        raise ValidationError("the SPDE method needs at least two focal parameters; use the GP method",
                              stage="subset")
    nb = psa.net_benefit(ds, k)
    notes.extend(nb.warnings)
    inc = psa.incremental_net_benefit(nb)
    X = focal_matrix(ds, sub, cfg.whiten)

    jobs = range(1, inc.T + 1)
    if cfg.threads > 1 and inc.T > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            fits = list(pool.map(lambda t: _fit_treatment(t, X, inc.nb[:, t], cfg), jobs))
    else:
        fits = [_fit_treatment(t, X, inc.nb[:, t], cfg) for t in jobs]

    fitted = np.zeros_like(inc.nb)
    for f in fits:
        fitted[:, f.treatment] = f.fitted
        if f.info.get("zero_signal"):
            notes.append(f"treatment {f.treatment}: incremental net benefit is constant, no fit needed")
        if f.info.get("pfc", {}).get("d", 0) > 2:
            notes.append(f"treatment {f.treatment}: AIC prefers d={f.info['pfc']['d']} > 2; "
                         "the 2-D projection may lose information, check residuals")
    surfaces = psa.FittedSurfaces(fitted, np.array([0.0] + [f.residual_sd for f in fits]))
    value = psa.evppi_from_fitted(surfaces)
    return EvppiEstimate(
        value=value, method="spde", evpi=psa.evpi_mc(nb), wtp=nb.wtp,
        subset=[ds.param_names[i] for i in sub.focal], seed=seed,
        timing_s=time.perf_counter() - t0, fitted=fitted, observed=inc.nb, treatments=fits,
        warnings=notes, config={**cfg.to_dict(), "threads": cfg.threads},
    )


def evpi_spde(ds: psa.PsaDataset, k: float = 20000.0, config: EngineConfig | None = None,
              seed: int | None = None) -> EvppiEstimate:
    return evppi_spde(ds, psa.SubsetSpec.all(ds.P), k, config, seed)
