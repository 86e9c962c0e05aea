"""Sparse symmetric positive definite factorization.

SuperLU in symmetric mode with diagonal pivoting and an approximate minimum
degree ordering gives ``P A P' = L D L'``.  That is enough for solves,
log-determinants and sampling, so no separate Cholesky code path is needed.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu, spsolve_triangular

from .errors import NumericError


class SpdFactor:
    def __init__(self, A, stage: str = "factorization", **context):
        A = sp.csc_matrix(A)
        self.n = A.shape[0]
        try:
            self._lu = splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                            options={"SymmetricMode": True})
        except RuntimeError as exc:
            raise NumericError(f"sparse factorization failed: {exc}", stage=stage, **context) from None
        d = self._lu.U.diagonal()
        if not np.all(d > 0) or not np.array_equal(self._lu.perm_r, self._lu.perm_c):
            raise NumericError("matrix is not numerically positive definite", stage=stage, **context)
        self._d = d
        self.logdet = float(np.sum(np.log(d)))

    @property
    def factor_nnz(self) -> int:
        """Nonzeros of the triangular factor, diagonal included."""
        return int(self._lu.L.nnz)

    def solve(self, b: np.ndarray) -> np.ndarray:
        return self._lu.solve(np.asarray(b, dtype=float))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """n draws from N(0, A^-1), returned as an (n_dim, n) array."""
        # with U = D L', P A P' = U' D^-1 U, so x = P' U^-1 D^(1/2) z
        z = rng.standard_normal((self.n, n)) * np.sqrt(self._d)[:, None]
        y = spsolve_triangular(sp.csr_matrix(self._lu.U), z, lower=False)
        return y[self._lu.perm_c]

    def quad_diag(self, B) -> np.ndarray:
        """diag(B A^-1 B') for a sparse or dense B with n_dim columns."""
        B = sp.csr_matrix(B)
        out = np.empty(B.shape[0])
        step = 512
        for start in range(0, B.shape[0], step):
            blk = B[start:start + step]
            X = self.solve(blk.T.toarray())
            out[start:start + step] = np.asarray(blk.multiply(X.T).sum(axis=1)).ravel()
        return out
