"""Linear finite elements for the Matern SPDE with alpha = 2 (nu = 1 in 2-D)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import gamma as gamma_fn
from scipy.special import kv

from .errors import DomainError, NumericError, ValidationError
from .mesh import Mesh
from .sparse import SpdFactor


@dataclass(frozen=True)
class SpdeOperator:
    """Lumped mass ``C`` (diagonal) and stiffness ``G``; ``G2`` caches G C^-1 G."""

    C: sp.csr_matrix
    G: sp.csr_matrix
    G2: sp.csr_matrix = field(init=False, repr=False)

    def __post_init__(self):
        cinv = sp.diags(1.0 / self.C.diagonal())
        object.__setattr__(self, "G2", sp.csr_matrix(self.G @ cinv @ self.G))

    @property
    def n(self) -> int:
        return self.C.shape[0]


def fem_matrices(mesh: Mesh) -> SpdeOperator:
    tri = mesh.triangles
    p = mesh.vertices[tri]                     # M x 3 x 2
    area = mesh.signed_areas()
    if np.any(~(area > 0)):
        bad = int(np.flatnonzero(~(area > 0))[0])
        raise ValidationError(f"triangle {bad} has non-positive area {area[bad]:.3g}")
    # edge opposite each local vertex; gradients of the hat functions are rot90(edge) / (2 area)
    e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
    local = np.einsum("mik,mjk->mij", e, e) / (4.0 * area)[:, None, None]
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    n = mesh.n_vertices
    G = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    G.sum_duplicates()
    mass = np.bincount(tri.ravel(), weights=np.repeat(area / 3.0, 3), minlength=n)
    if np.any(mass <= 0):
        raise ValidationError("mesh has vertices that belong to no triangle")
    return SpdeOperator(sp.diags(mass).tocsr(), G)


@dataclass(frozen=True)
class PrecisionMatrix:
    Q: sp.csr_matrix
    kappa: float
    tau: float
    alpha: int = 2

    @property
    def marginal_variance(self) -> float:
        return matern_marginal_variance(self.kappa, self.tau)

    def factor(self) -> SpdFactor:
        return SpdFactor(self.Q, stage="precision", kappa=self.kappa, tau=self.tau)


def spde_structure(op: SpdeOperator, kappa: float) -> sp.csr_matrix:
    """kappa^4 C + 2 kappa^2 G + G C^-1 G, i.e. the precision at tau = 1."""
    k2 = kappa * kappa
    return sp.csr_matrix(k2 * k2 * op.C + 2.0 * k2 * op.G + op.G2)


def precision_matrix(op: SpdeOperator, kappa: float, tau: float, check: bool = True) -> PrecisionMatrix:
    if not (kappa > 0 and tau > 0):
        raise DomainError(f"kappa and tau must be positive, got kappa={kappa}, tau={tau}")
    Q = (tau * tau) * spde_structure(op, kappa)
    pm = PrecisionMatrix(Q, float(kappa), float(tau))
    if check:
        try:
            pm.factor()
        except NumericError as exc:
            raise NumericError(f"SPDE precision is not positive definite (kappa={kappa}, tau={tau})",
                               stage="precision", kappa=kappa, tau=tau) from exc
    return pm


def matern_marginal_variance(kappa: float, tau: float, nu: float = 1.0, dim: int = 2) -> float:
    alpha = nu + dim / 2.0
    return float(gamma_fn(nu) / (gamma_fn(alpha) * (4.0 * np.pi) ** (dim / 2.0)
                                 * kappa ** (2.0 * nu) * tau ** 2))


def matern_covariance(dist, kappa: float, nu: float, sigma2: float):
    """sigma2 / (Gamma(nu) 2^(nu-1)) (kappa d)^nu K_nu(kappa d), with the d = 0 limit sigma2."""
    if not (kappa > 0 and nu > 0 and sigma2 > 0):
        raise DomainError("kappa, nu and sigma2 must be positive")
    d = np.asarray(dist, dtype=float)
    if np.any(d < 0):
        raise DomainError("distances must be non-negative")
    x = kappa * d
    with np.errstate(invalid="ignore", over="ignore"):
        val = sigma2 / (gamma_fn(nu) * 2.0 ** (nu - 1.0)) * x ** nu * kv(nu, x)
    val = np.where(x < 1e-12, sigma2, np.nan_to_num(val, nan=0.0))
    return float(val) if np.ndim(val) == 0 else val


def matern_range(kappa: float, nu: float = 1.0) -> float:
    """Distance at which the correlation drops to about 0.13."""
    return float(np.sqrt(8.0 * nu) / kappa)
