"""Parametric covariance models, empirical variograms and weighted fitting.

Range conventions (``a`` is the essential range):

* exponential: ``c(h) = exp(-3 h / a)``
* gaussian:    ``c(h) = exp(-3 h^2 / a^2)``
* spherical:   ``c(h) = 1 - 1.5 h/a + 0.5 (h/a)^3`` for ``h < a``, else 0
* nugget:      ``c(h) = 1{h = 0}``
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .core import SampleSet, bbox_diagonal
from .errors import DegenerateError, ValidationError

KINDS = ("spherical", "exponential", "gaussian", "nugget")
DEFAULT_BINS = 20


class VariogramFitWarning(UserWarning):
    """Fit degenerated to a pure nugget model."""


@dataclass(frozen=True)
class VariogramModel:
    kind: str
    sill: float = 1.0
    essential_range: float = 1.0
    nugget: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown variogram kind {self.kind!r}")
        if not (self.sill >= 0 and self.nugget >= 0):
            raise ValidationError("sill and nugget must be non-negative")
        if self.kind != "nugget" and not self.essential_range > 0:
            raise ValidationError("essential_range must be positive")
        object.__setattr__(self, "sill", float(self.sill))
        object.__setattr__(self, "nugget", float(self.nugget))
        object.__setattr__(self, "essential_range", float(self.essential_range))

    @property
    def total_sill(self) -> float:
        return self.sill + self.nugget

    def structure(self, h):
        """Unit-sill correlation of the structured part, ``c(h)``."""
        h = np.asarray(h, dtype=float)
        a = self.essential_range
        if self.kind == "exponential":
            return np.exp(-3.0 * h / a)
        if self.kind == "gaussian":
            return np.exp(-3.0 * (h / a) ** 2)
        if self.kind == "spherical":
            r = np.minimum(h / a, 1.0)
            return 1.0 - 1.5 * r + 0.5 * r**3
        return (h == 0).astype(float)

    def covariance(self, h):
        h = np.asarray(h, dtype=float)
        if np.any(h < 0):
            raise ValueError("distance must be non-negative")
        return self.sill * self.structure(h) + self.nugget * (h == 0)

    def variogram(self, h):
        return self.total_sill - self.covariance(h)

    def correlation_form(self) -> "VariogramModel":
        """Same model rescaled so that ``covariance(0) == 1``."""
        total = self.total_sill
        if total <= 0:
            raise DegenerateError("zero-variance model has no correlation form")
        return VariogramModel(self.kind, self.sill / total, self.essential_range, self.nugget / total)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "sill": self.sill,
                "essential_range": self.essential_range, "nugget": self.nugget}

    @classmethod
    def from_dict(cls, d) -> "VariogramModel":
        return cls(d["kind"], d.get("sill", 1.0), d.get("essential_range", 1.0), d.get("nugget", 0.0))


def covariance(model: VariogramModel, h):
    """``sill * c(h) + nugget * 1{h = 0}``."""
    return model.covariance(h)


def covariance_matrix(model: VariogramModel, a, b=None) -> np.ndarray:
    a = np.atleast_2d(a)
    d = cdist(a, a if b is None else np.atleast_2d(b))
    return model.covariance(d)


@dataclass(frozen=True)
class EmpiricalVariogram:
    """Binned semivariances.

    ``lags`` are bin centres; ``distances`` the mean pair distance of each bin
    (bin centre for empty bins), which is what fitting uses.
    """

    lags: np.ndarray
    gamma: np.ndarray
    counts: np.ndarray
    distances: np.ndarray | None = None

    def nonempty(self):
        return self.counts > 0

    def to_csv(self, path) -> None:
        lines = ["lag,gamma,count"]
        for h, g, c in zip(self.lags, self.gamma, self.counts):
            lines.append(f"{h:.17g},{g:.17g},{int(c)}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _pair_sums(coords, values, edges, chunk=512):
    """Per-bin pair counts, distance sums and squared-difference sums over i < j."""
    n = coords.shape[0]
    nb = len(edges) - 1
    max_lag = edges[-1]
    width = edges[1] - edges[0]
    counts = np.zeros(nb)
    dsum = np.zeros(nb)
    sqsum = np.zeros(nb)
    for start in range(0, n - 1, chunk):
        stop = min(start + chunk, n - 1)
        d = cdist(coords[start:stop], coords[start + 1:])
        diff = values[start:stop, None] - values[None, start + 1:]
        rows = np.arange(start, stop)[:, None]
        cols = np.arange(start + 1, n)[None, :]
        keep = (cols > rows) & (d <= max_lag) & (d > 0)
        dk = d[keep]
        idx = np.minimum((dk / width).astype(np.int64), nb - 1)
        counts += np.bincount(idx, minlength=nb)
        dsum += np.bincount(idx, weights=dk, minlength=nb)
        sqsum += np.bincount(idx, weights=diff[keep] ** 2, minlength=nb)
    return counts, dsum, sqsum


def empirical_variogram(samples, values=None, n_bins: int = DEFAULT_BINS, max_lag: float | None = None):
    """Classical (Matheron) estimator ``gamma = sum (v_i - v_j)^2 / (2 N)`` per distance bin.

    ``samples`` is either a :class:`SampleSet` (its ``z`` is used) or a
    coordinate array, in which case ``values`` must be given.
    """
    if isinstance(samples, SampleSet):
        coords, vals = samples.coords, samples.z
    else:
        coords, vals = np.atleast_2d(np.asarray(samples, dtype=float)), np.asarray(values, dtype=float)
    if coords.shape[0] < 2:
        raise DegenerateError("need at least two points for a variogram")
    if max_lag is None:
        max_lag = 0.5 * bbox_diagonal(coords)
    if not max_lag > 0:
        raise ValueError("max_lag must be positive")
    edges = np.linspace(0.0, max_lag, n_bins + 1)
    counts, dsum, sqsum = _pair_sums(coords, vals, edges)
    if counts.sum() == 0:
        raise DegenerateError("no pairs within max_lag")
    centers = 0.5 * (edges[:-1] + edges[1:])
    nz = counts > 0
    gamma = np.zeros(n_bins)
    gamma[nz] = sqsum[nz] / (2.0 * counts[nz])
    distances = centers.copy()
    distances[nz] = dsum[nz] / counts[nz]
    return EmpiricalVariogram(centers, gamma, counts.astype(np.int64), distances)


def _shape(kind, h, a):
    return 1.0 - VariogramModel(kind, 1.0, a, 0.0).structure(h)


def _nonneg_linear_fit(g, gam, w, fit_nugget=True):
    """Minimise sum w (gam - n - s g)^2 over n, s >= 0; returns (n, s, loss)."""
    candidates = []
    sw, sg, sgg = w.sum(), (w * g).sum(), (w * g * g).sum()
    sy, sgy = (w * gam).sum(), (w * g * gam).sum()
    det = sw * sgg - sg * sg
    if fit_nugget and det > 1e-14 * max(sw * sgg, 1e-300):
        n = (sgg * sy - sg * sgy) / det
        s = (sw * sgy - sg * sy) / det
        if n >= 0 and s >= 0:
            candidates.append((n, s))
    if sgg > 0:
        candidates.append((0.0, max(sgy / sgg, 0.0)))
    if fit_nugget or not candidates:
        candidates.append((max(sy / sw, 0.0), 0.0))
    best = None
    for n, s in candidates:
        loss = float((w * (gam - n - s * g) ** 2).sum())
        if best is None or loss < best[2]:
            best = (float(n), float(s), loss)
    return best


def _golden_min(f, lo, hi, tol=1e-7, max_iter=200):
    invphi = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if abs(b - a) <= tol * (abs(a) + abs(b)):
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return (c, fc) if fc < fd else (d, fd)


def fit_variogram(emp: EmpiricalVariogram, kinds=("spherical", "exponential", "gaussian"),
                  range_bounds: tuple | None = None, fit_nugget: bool = True) -> VariogramModel:
    """Weighted least-squares fit, best over ``kinds``.

    Weights are ``count / max(gamma, eps)^2``.  For each kind a golden-section
    search over log-range is nested around a closed-form non-negative solve
    for (nugget, sill); ``fit_nugget=False`` pins the nugget at zero.  An
    all-zero variogram yields a zero nugget model and a
    :class:`VariogramFitWarning`.
    """
    mask = emp.nonempty()
    if mask.sum() < 3:
        raise DegenerateError("need at least three non-empty bins to fit")
    h = (emp.distances if emp.distances is not None else emp.lags)[mask]
    gam = emp.gamma[mask]
    if np.all(gam <= 0):
        warnings.warn("empirical variogram is identically zero; returning nugget model",
                      VariogramFitWarning, stacklevel=2)
        return VariogramModel("nugget", 0.0, 1.0, 0.0)
    eps = 1e-3 * gam[gam > 0].mean()
    w = emp.counts[mask] / np.maximum(gam, eps) ** 2
    w = w / w.sum()
    if range_bounds is None:
        range_bounds = (0.1 * h.min(), 4.0 * h.max())
    lo, hi = math.log(range_bounds[0]), math.log(range_bounds[1])

    best = None
    for kind in kinds:
        if kind == "nugget":
            n, s, loss = _nonneg_linear_fit(np.ones_like(h), gam, w, True)
            cand = (loss, VariogramModel("nugget", n + s, 1.0, 0.0))
        else:
            def obj(t, kind=kind):
                return _nonneg_linear_fit(_shape(kind, h, math.exp(t)), gam, w, fit_nugget)[2]

            grid = np.linspace(lo, hi, 41)
            vals = [obj(t) for t in grid]
            k = int(np.argmin(vals))
            t_best, _ = _golden_min(obj, grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)])
            a = math.exp(t_best)
            n, s, loss = _nonneg_linear_fit(_shape(kind, h, a), gam, w, fit_nugget)
            cand = (loss, VariogramModel(kind, s, a, n))
        if best is None or cand[0] < best[0]:
            best = cand
    return best[1]


def grid_variogram(values, cell_size: float = 1.0, n_bins: int = DEFAULT_BINS,
                   max_lag: float | None = None) -> EmpiricalVariogram:
    """Empirical variogram over all cell pairs of a raster, via FFT correlations.

    NaN cells are excluded.
    """
    from scipy.fft import irfft2, next_fast_len, rfft2

    v = np.asarray(values, dtype=float)
    ok = np.isfinite(v)
    if ok.sum() < 2:
        raise DegenerateError("need at least two finite cells")
    nr, nc = v.shape
    if max_lag is None:
        max_lag = 0.5 * cell_size * math.hypot(nr - 1, nc - 1)
    shape = (next_fast_len(2 * nr - 1), next_fast_len(2 * nc - 1))
    m = ok.astype(float)
    x = np.where(ok, v, 0.0)

    def corr(a, b):
        return irfft2(np.conj(rfft2(a, shape)) * rfft2(b, shape), shape)

    # pair sums for displacement d: sum over a with a+d valid
    npairs = corr(m, m)
    sq = corr(x * x, m) + corr(m, x * x) - 2.0 * corr(x, x)
    dy = np.fft.fftfreq(shape[0], 1.0 / shape[0])
    dx = np.fft.fftfreq(shape[1], 1.0 / shape[1])
    h = cell_size * np.hypot(dy[:, None], dx[None, :])
    npairs = np.rint(npairs)
    keep = (h > 0) & (h <= max_lag) & (npairs > 0)
    edges = np.linspace(0.0, max_lag, n_bins + 1)
    width = edges[1] - edges[0]
    idx = np.minimum((h[keep] / width).astype(np.int64), n_bins - 1)
    w = npairs[keep]
    counts = np.bincount(idx, weights=w, minlength=n_bins)
    dsum = np.bincount(idx, weights=w * h[keep], minlength=n_bins)
    sqsum = np.bincount(idx, weights=sq[keep], minlength=n_bins)
    centers = 0.5 * (edges[:-1] + edges[1:])
    nz = counts > 0
    gamma = np.zeros(n_bins)
    gamma[nz] = sqsum[nz] / (2.0 * counts[nz])
    distances = centers.copy()
    distances[nz] = dsum[nz] / counts[nz]
    # each unordered pair was counted twice (d and -d)
    return EmpiricalVariogram(centers, gamma, (counts / 2).astype(np.int64), distances)
