"""Principal fitted components with isotropic errors.

The inverse regression phi = mu + Gamma beta f(y) + sigma eps is fitted for a
polynomial basis f of degree h and reduction dimension d.  Under isotropic
errors the maximum likelihood directions are the leading eigenvectors of the
fitted covariance, so every (d, h) fit is closed-form.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateColumnError, NumericError, ValidationError
from .psa import rescale_columns, RescaleRecord

TIE_RTOL = 1e-10


def poly_basis(nb_column, h: int) -> np.ndarray:
    """Centered, orthonormalized powers 1..h of the standardized response."""
    y = np.asarray(nb_column, dtype=float).ravel()
    if not 1 <= h <= 6:
        raise ValidationError(f"basis degree must be in 1..6, got {h}")
    sd = y.std(ddof=1) if y.size > 1 else 0.0
    if not sd > 1e-13 * max(1.0, np.abs(y).max()):
        raise DegenerateColumnError("response is constant; no inverse regression possible")
    z = (y - y.mean()) / sd
    F = np.empty((y.size, h))
    for j in range(h):
        col = z ** (j + 1)
        col = col - col.mean()
        ref = np.linalg.norm(col)
        # two modified Gram-Schmidt sweeps keep orthogonality at rounding level
        for _ in range(2):
            for i in range(j):
                col = col - (F[:, i] @ col) * F[:, i]
            col = col - col.mean()
        norm = np.linalg.norm(col)
        if not norm > 1e-10 * max(ref, 1e-300):
            raise DegenerateColumnError(f"power {j + 1} of the response is collinear with lower powers")
        F[:, j] = col / norm
    return F


def _canonical_signs(vecs: np.ndarray) -> np.ndarray:
    out = vecs.copy()
    for j in range(out.shape[1]):
        nz = np.flatnonzero(np.abs(out[:, j]) > 1e-12)
        if nz.size and out[nz[0], j] < 0:
            out[:, j] = -out[:, j]
    return out


def _sorted_eigh(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    try:
        vals, vecs = np.linalg.eigh(0.5 * (M + M.T))
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigen-decomposition failed: {exc}", stage="pfc") from None
    vecs = _canonical_signs(vecs)
    scale = max(abs(vals).max(), 1e-300)
    # descending eigenvalue; inside a tie cluster, lexicographically larger loadings first
    keys = [(-round(v / (scale * TIE_RTOL)), tuple(-vecs[:, j])) for j, v in enumerate(vals)]
    order = sorted(range(len(vals)), key=lambda j: keys[j])
    return vals[order], vecs[:, order]


@dataclass(frozen=True)
class PfcModel:
    mu: np.ndarray
    gamma: np.ndarray
    d: int
    h: int
    sigma2_err: float
    loglik: float
    aic: float
    eigenvalues: np.ndarray
    aux: np.ndarray | None = None
    tie: bool = False

    @property
    def n_params(self) -> int:
        p = self.mu.size
        return p + self.d * (self.h + p - self.d) + 1

    def directions(self, k: int = 2) -> np.ndarray:
        """First ``k`` projection directions, filled with the auxiliary direction when d < k."""
        if self.d >= k:
            return self.gamma[:, :k]
        if self.aux is None or self.mu.size < k:
            raise ValidationError(f"a {k}-D projection needs at least {k} focal parameters")
        return np.column_stack([self.gamma, self.aux[:, :k - self.d]])


def _fitted_cov(phi_c: np.ndarray, basis: np.ndarray) -> np.ndarray:
    proj = basis @ (basis.T @ phi_c)
    return proj.T @ proj / phi_c.shape[0]


def fit_pfc(phi, basis, d: int) -> PfcModel:
    X = np.asarray(phi, dtype=float)
    F = np.asarray(basis, dtype=float)
    S, p = X.shape
    h = F.shape[1]
    if not 1 <= d <= min(p, h):
        raise ValidationError(f"need 1 <= d <= min(P, h) = {min(p, h)}, got d={d}")
    if S <= h + 1:
        raise ValidationError(f"need S > h + 1 rows, got S={S}, h={h}")
    mu = X.mean(axis=0)
    Xc = X - mu
    vals, vecs = _sorted_eigh(_fitted_cov(Xc, F))
    tie = False
    if d < p and abs(vals[d - 1] - vals[d]) <= TIE_RTOL * max(abs(vals[0]), 1e-300):
        tie = True
        warnings.warn(f"eigenvalue tie at the d={d} boundary; resolved by loading order", stacklevel=2)
    total = float(np.sum(Xc * Xc)) / S
    sigma2 = (total - float(np.sum(vals[:d]))) / p
    if not sigma2 > 0:
        sigma2 = max(total, 1.0) * 1e-300 if total > 0 else 1e-300
    loglik = -0.5 * S * p * (1.0 + np.log(2 * np.pi)) - 0.5 * S * p * np.log(sigma2)
    aux = vecs[:, d:d + 1] if d < p else None
    model = PfcModel(mu, vecs[:, :d], d, h, float(sigma2), float(loglik), 0.0, vals, aux, tie)
    return _with_aic(model)


def _with_aic(m: PfcModel) -> PfcModel:
    return PfcModel(m.mu, m.gamma, m.d, m.h, m.sigma2_err, m.loglik,
                    float(-2.0 * m.loglik + 2.0 * m.n_params), m.eigenvalues, m.aux, m.tie)


@dataclass(frozen=True)
class SelectionRow:
    d: int
    h: int
    loglik: float
    aic: float
    chosen: bool = False

    def to_dict(self) -> dict:
        return {"d": self.d, "h": self.h, "loglik": self.loglik, "aic": self.aic, "chosen": self.chosen}


@dataclass(frozen=True)
class PfcSelection:
    model: PfcModel
    table: list[SelectionRow]
    aic_d: int

    @property
    def d_exceeds_2(self) -> bool:
        return self.aic_d > 2


def select_pfc(phi, nb_column, d_max: int = 4, h_max: int = 4) -> PfcSelection:
    """Fit every (d, h) with d <= min(h, d_max, P) and keep the AIC minimizer.

    For a one-dimensional choice the auxiliary second direction comes from
    the fitted covariance at degree max(h, 2), so it carries response
    information even when the chosen basis is linear.
    """
    X = np.asarray(phi, dtype=float)
    p = X.shape[1]
    if h_max < 1 or d_max < 1:
        raise ValidationError("d_max and h_max must be positive")
    fits: list[PfcModel] = []
    bases = {}
    for h in range(1, h_max + 1):
        bases[h] = poly_basis(nb_column, h)
        for d in range(1, min(h, d_max, p) + 1):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                fits.append(fit_pfc(X, bases[h], d))
    best = min(range(len(fits)), key=lambda i: (fits[i].aic, fits[i].d, fits[i].h))
    model = fits[best]
    if model.d == 1 and p >= 2:
        h2 = max(model.h, 2)
        basis = bases.get(h2)
        if basis is None:
            basis = poly_basis(nb_column, h2)
        _, vecs = _sorted_eigh(_fitted_cov(X - model.mu, basis))
        g = model.gamma[:, 0]
        aux = None
        for j in range(vecs.shape[1]):
            v = vecs[:, j] - (g @ vecs[:, j]) * g
            if np.linalg.norm(v) > 0.5:
                aux = v / np.linalg.norm(v)
                break
        model = PfcModel(model.mu, model.gamma, model.d, model.h, model.sigma2_err, model.loglik,
                         model.aic, model.eigenvalues, _canonical_signs(aux[:, None]), model.tie)
    table = [SelectionRow(m.d, m.h, m.loglik, m.aic, i == best) for i, m in enumerate(fits)]
    return PfcSelection(model, table, model.d)


def project(model: PfcModel, phi, standardize: bool = True) -> tuple[np.ndarray, RescaleRecord | None]:
    """Scores on the first two directions, optionally standardized column-wise."""
    X = np.asarray(phi, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.mu.size:
        raise ValidationError(f"model expects {model.mu.size} columns, got shape {X.shape}")
    z = (X - model.mu) @ model.directions(2)
    if not standardize:
        return z, None
    return rescale_columns(z)
