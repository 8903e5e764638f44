"""Simple kriging, dual kriging and closed-form leave-one-out cross-validation.

The leave-one-out estimates come straight from the precision matrix
``P = C^-1``: with residuals ``r = z - m`` and dual coefficients ``b = P r``,

    z_{-i} = z_i - b_i / P_ii,      Var(z_i - z_{-i}) = 1 / P_ii,

so a single factorization replaces ``n`` separate solves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve_triangular
from scipy.spatial.distance import cdist

from .core import find_duplicate_locations
from .errors import SingularSystemError, ValidationError
from .variogram import VariogramModel

JITTER_START = 1e-10
JITTER_MAX = 1e-6
_CHUNK = 4096


class KrigingSystem:
    """Factorized simple-kriging system on a fixed data configuration.

    Treat instances as immutable; they are safe to share between threads.
    """

    def __init__(self, locations, z, model: VariogramModel, mean: float | None = None):
        locations = np.atleast_2d(np.asarray(locations, dtype=float))
        z = np.asarray(z, dtype=float).reshape(-1)
        if locations.shape[0] != z.shape[0]:
            raise ValidationError("locations and values differ in length")
        if z.shape[0] < 1:
            raise ValidationError("kriging needs at least one datum")
        dup = find_duplicate_locations(locations)
        if dup is not None:
            raise ValidationError(f"data {dup[0]} and {dup[1]} are coincident")
        self.locations = locations
        self.z = z
        self.model = model
        self.mean = float(z.mean()) if mean is None else float(mean)
        self.C = model.covariance(cdist(locations, locations))
        self.jitter = 0.0
        self._factor = self._factorize()
        self._precision = None
        self._dual = None

    def _factorize(self):
        scale = self.model.total_sill if self.model.total_sill > 0 else 1.0
        jitter = JITTER_START
        n = self.C.shape[0]
        while jitter <= JITTER_MAX * (1 + 1e-9):
            A = self.C + jitter * scale * np.eye(n)
            try:
                factor = cho_factor(A, lower=True, check_finite=False)
            except LinAlgError:
                jitter *= 10.0
                continue
            if np.all(np.isfinite(factor[0])) and np.all(np.diag(factor[0]) > 0):
                self.jitter = jitter * scale
                return factor
            jitter *= 10.0
        raise SingularSystemError(
            f"covariance matrix not positive definite even with jitter {JITTER_MAX:g} x sill"
        )

    @property
    def n(self) -> int:
        return self.z.shape[0]

    def solve(self, rhs):
        return cho_solve(self._factor, rhs, check_finite=False)

    @property
    def precision(self) -> np.ndarray:
        """``P = (C + jitter I)^-1``."""
        if self._precision is None:
            P = self.solve(np.eye(self.n))
            P = 0.5 * (P + P.T)
            P.setflags(write=False)
            self._precision = P
        return self._precision

    def precision_diagonal(self) -> np.ndarray:
        """``diag(P)`` from the inverse Cholesky factor, without forming ``P``."""
        if self._precision is not None:
            return np.diag(self._precision).copy()
        Linv = solve_triangular(self._factor[0], np.eye(self.n), lower=True, check_finite=False)
        return np.einsum("ij,ij->j", Linv, Linv)

    @property
    def dual_coefficients(self) -> np.ndarray:
        """``b = P (z - m)``."""
        if self._dual is None:
            b = self.solve(self.z - self.mean)
            b.setflags(write=False)
            self._dual = b
        return self._dual

    def cross_covariance(self, targets) -> np.ndarray:
        targets = np.atleast_2d(np.asarray(targets, dtype=float))
        return self.model.covariance(cdist(self.locations, targets))


def build_system(locations, z, model: VariogramModel, mean: float | None = None) -> KrigingSystem:
    """Factorize the data covariance; ``mean=None`` uses the data mean."""
    return KrigingSystem(locations, z, model, mean)


def krige_at(sys: KrigingSystem, target) -> tuple[float, float]:
    """Simple-kriging estimate and variance at one location (primal form)."""
    c = sys.cross_covariance(np.asarray(target, dtype=float).reshape(1, -1))[:, 0]
    lam = sys.solve(c)
    est = sys.mean + float(lam @ (sys.z - sys.mean))
    var = sys.model.total_sill - float(lam @ c)
    return est, max(var, 0.0)


def krige_many(sys: KrigingSystem, targets) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized primal kriging: estimates and variances at many targets."""
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    est = np.empty(targets.shape[0])
    var = np.empty(targets.shape[0])
    r = sys.z - sys.mean
    for s in range(0, targets.shape[0], _CHUNK):
        c = sys.cross_covariance(targets[s:s + _CHUNK])
        lam = sys.solve(c)
        est[s:s + _CHUNK] = sys.mean + lam.T @ r
        var[s:s + _CHUNK] = sys.model.total_sill - np.einsum("ij,ij->j", lam, c)
    return est, np.maximum(var, 0.0)


def dual_krige_field(sys: KrigingSystem, targets) -> np.ndarray:
    """Kriging estimates via the dual form ``m + sum_i b_i C(x_i, x)``."""
    targets = np.asarray(targets, dtype=float)
    if targets.size == 0:
        return np.empty(0)
    targets = np.atleast_2d(targets)
    b = sys.dual_coefficients
    out = np.empty(targets.shape[0])
    for s in range(0, targets.shape[0], _CHUNK):
        out[s:s + _CHUNK] = sys.mean + sys.cross_covariance(targets[s:s + _CHUNK]).T @ b
    return out


@dataclass(frozen=True)
class CrossValidationResult:
    zk_minus: np.ndarray
    innovations: np.ndarray
    variances: np.ndarray


def loo_cross_validate(sys: KrigingSystem) -> CrossValidationResult:
    """Leave-one-out kriging estimates from the precision matrix."""
    p_diag = sys.precision_diagonal()
    innov = sys.dual_coefficients / p_diag
    return CrossValidationResult(sys.z - innov, innov, 1.0 / p_diag)


def innovation_covariance(sys: KrigingSystem) -> np.ndarray:
    """Covariance of the innovations, ``P_ij / (P_ii P_jj)``."""
    P = sys.precision
    d = np.diag(P)
    return P / np.outer(d, d)

