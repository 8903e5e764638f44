"""Conditional simulation by sampling envelopes with a correlated uniform field.

Each realization draws a stationary Gaussian field ``X``, conditions it to
Gaussian values ``g_i`` at the data (drawn from truncated Gaussians so that
the envelope inverse at ``G(g_i)`` returns the datum), and reads every cell's
envelope at ``U = G(X_c)``.
"""

from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import hermite_e
from scipy.special import ndtr, ndtri

from .core import RasterGrid, derive_rng
from .embedding import EmberModel, embedded_features, envelope_rows, grid_features
from .errors import DegenerateError, ValidationError
from .forest import StepCDF, WeightRows
from .kriging import KrigingSystem
from .variogram import EmpiricalVariogram, VariogramModel, empirical_variogram, fit_variogram

EIGEN_TOL = 1e-10
PAD_FACTORS = (2, 3, 4)
QUADRATURE_NODES = 100
INTERVAL_WIDEN = 1e-12
_CHUNK = 4096


class SpectralApproximationWarning(UserWarning):
    """Circulant embedding needed clipping of negative eigenvalues."""


class CorrelationFitWarning(UserWarning):
    """Higher-order correlation inversion failed; first order used instead."""


@dataclass(frozen=True)
class SamplingFieldModel:
    """Correlation of the Gaussian field behind the uniform sampling field."""

    correlation: VariogramModel
    order: int = 1

    def __post_init__(self):
        if abs(self.correlation.total_sill - 1.0) > 1e-9:
            raise ValidationError("sampling correlation must have unit total sill")
        if self.order < 1:
            raise ValidationError("Hermite order must be >= 1")

    def rho(self, h):
        return self.correlation.covariance(h)


# ---------------------------------------------------------------- residuals

def _data_rows(model: EmberModel) -> WeightRows:
    s = model.samples
    return envelope_rows(model, embedded_features(model, s.coords, s.y))


def standardized_residuals(model: EmberModel) -> np.ndarray:
    """``(z_i - mean_i) / std_i`` from envelopes at the data; NaN where std is 0."""
    rows = _data_rows(model)
    mu, sd = rows.mean(), rows.std()
    ok = sd > 0
    if not ok.any():
        raise DegenerateError("all envelopes at the data have zero spread")
    if not ok.all():
        warnings.warn(f"{int((~ok).sum())} data with zero envelope spread skipped", stacklevel=2)
    r = np.full(mu.shape, np.nan)
    r[ok] = (model.samples.z[ok] - mu[ok]) / sd[ok]
    return r


# ---------------------------------------------------------------- Hermite

def hermite_basis(g, order: int) -> np.ndarray:
    """Normalized probabilists' Hermite polynomials ``He_i(g)/sqrt(i!)``, shape ``(order+1, len(g))``."""
    g = np.asarray(g, dtype=float)
    out = np.empty((order + 1,) + g.shape)
    for i in range(order + 1):
        c = np.zeros(i + 1)
        c[i] = 1.0
        out[i] = hermite_e.hermeval(g, c) / math.sqrt(math.factorial(i))
    return out


@functools.lru_cache(maxsize=8)
def _quadrature(n_nodes: int):
    x, w = hermite_e.hermegauss(n_nodes)
    return x, w / math.sqrt(2 * math.pi)


def hermite_coefficients(envelope: StepCDF, order: int, n_nodes: int = QUADRATURE_NODES) -> np.ndarray:
    """Coefficients ``phi^0..phi^N`` of ``F^-1(G(g))`` in the normalized Hermite basis."""
    x, w = _quadrature(n_nodes)
    f = envelope.quantile(np.clip(ndtr(x), 0.0, 1.0))
    phi = hermite_basis(x, order) @ (w * f)
    if order >= 1 and not abs(phi[1]) > 1e-14 * max(1.0, abs(phi[0])):
        raise DegenerateError("first Hermite coefficient vanishes")
    return phi


def normalized_hermite(phi) -> np.ndarray:
    """``phi^i / phi^1`` for ``i >= 2``."""
    phi = np.asarray(phi, dtype=float)
    return phi[2:] / phi[1]


# ---------------------------------------------------------------- correlation inference

def solve_correlation(c_r: float, coeffs, tol: float = 1e-13) -> float:
    """Solve ``c_r = sum_i coeffs[i-1] rho^i`` for ``rho`` in [-1, 1] by bisection.

    The search runs on the branch through 0 on which the polynomial is
    increasing, on the side of 0 that matches the sign of ``c_r``.  Raises
    ValueError when the polynomial decreases at 0 or the target lies outside
    the range of that branch.
    """
    c = np.concatenate([[0.0], np.asarray(coeffs, dtype=float)])
    f = np.polynomial.Polynomial(c)
    side = 1.0 if c_r >= 0 else -1.0
    t = side * np.linspace(0.0, 1.0, 201)
    steps = side * np.diff(f(t))
    if steps[0] <= 0:
        raise ValueError("correlation polynomial is not increasing at 0")
    bad = np.flatnonzero(steps <= 0)
    end = t[bad[0]] if bad.size else side
    lo, hi = (0.0, end) if side > 0 else (end, 0.0)
    flo, fhi = f(lo), f(hi)
    if not flo - 1e-12 <= c_r <= fhi + 1e-12:
        raise ValueError(f"target {c_r} outside [{flo}, {fhi}]")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if f(mid) < c_r:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _pair_products(coords, values, edges):
    """Per-bin mean of ``v_i * v_j`` over pairs (``values`` shape ``(n, k)``)."""
    from scipy.spatial.distance import pdist

    n = coords.shape[0]
    d = pdist(coords)
    iu, ju = np.triu_indices(n, 1)
    keep = (d > 0) & (d <= edges[-1])
    width = edges[1] - edges[0]
    nb = len(edges) - 1
    idx = np.minimum((d[keep] / width).astype(np.int64), nb - 1)
    counts = np.bincount(idx, minlength=nb)
    prod = values[iu[keep]] * values[ju[keep]]
    sums = np.stack([np.bincount(idx, weights=prod[:, j], minlength=nb)
                     for j in range(values.shape[1])], axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return sums / counts[:, None], counts


def _fit_rho(emp: EmpiricalVariogram, kinds) -> VariogramModel:
    # the sampling field is continuous: residual nugget stems from each datum's self-weight
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fitted = fit_variogram(emp, kinds, fit_nugget=False)
    if fitted.total_sill <= 0:
        return VariogramModel("nugget", 0.0, 1.0, 1.0)
    return fitted.correlation_form()


def infer_sampling_correlation(model: EmberModel, order: int = 1, n_bins: int = 20,
                               max_lag: float | None = None,
                               kinds=("exponential",)) -> SamplingFieldModel:
    """Fit the sampling-field correlation from standardized residuals at the data.

    First order fits the residual correlogram directly.  Higher orders invert,
    bin by bin, ``C_R = (rho + sum_i a_i rho^i) / (1 + sum_i a_i)`` where
    ``a_i`` averages ``phi~^i_x phi~^i_y`` over the pairs of the bin.
    """
    r = standardized_residuals(model)
    ok = np.isfinite(r)
    coords, r = model.samples.coords[ok], r[ok]
    emp = empirical_variogram(coords, r, n_bins=n_bins, max_lag=max_lag)
    var = float(np.var(r))
    if not var > 0:
        raise DegenerateError("residuals have zero variance")
    c_r = 1.0 - emp.gamma / var
    rho_first = _fit_rho(emp, kinds)
    if order == 1:
        return SamplingFieldModel(rho_first, 1)

    rows = _data_rows(model)
    idx = np.flatnonzero(ok)
    try:
        phis = np.array([normalized_hermite(hermite_coefficients(rows.row_cdf(i), order))
                         for i in idx])
    except DegenerateError:
        warnings.warn("degenerate envelope at a datum; using first-order correlation",
                      CorrelationFitWarning, stacklevel=2)
        return SamplingFieldModel(rho_first, 1)
    edges = np.linspace(0.0, emp.lags[-1] + (emp.lags[1] - emp.lags[0]) / 2, n_bins + 1)
    a, _ = _pair_products(coords, phis, edges)
    rho_bins = np.zeros(n_bins)
    try:
        for b in np.flatnonzero(emp.counts > 0):
            coeffs = np.concatenate([[1.0], a[b]])
            rho_bins[b] = solve_correlation(c_r[b], coeffs / coeffs.sum())
    except ValueError as exc:
        warnings.warn(f"higher-order inversion failed ({exc}); using first-order correlation",
                      CorrelationFitWarning, stacklevel=2)
        return SamplingFieldModel(rho_first, 1)
    emp_rho = EmpiricalVariogram(emp.lags, 1.0 - rho_bins, emp.counts, emp.distances)
    return SamplingFieldModel(_fit_rho(emp_rho, kinds), order)


# ---------------------------------------------------------------- Gaussian fields

@functools.lru_cache(maxsize=16)
def _embedding_spectrum(rho: VariogramModel, nrows: int, ncols: int, cell: float):
    for factor in PAD_FACTORS:
        m1 = _fast_len(factor * nrows)
        m2 = _fast_len(factor * ncols)
        dy = np.minimum(np.arange(m1), m1 - np.arange(m1)) * cell
        dx = np.minimum(np.arange(m2), m2 - np.arange(m2)) * cell
        h = np.hypot(dy[:, None], dx[None, :])
        lam = np.fft.fft2(rho.covariance(h)).real
        lam_max = lam.max()
        if lam.min() >= -EIGEN_TOL * lam_max:
            break
    negative = lam < -EIGEN_TOL * lam_max
    clipped = float(-lam[negative].sum() / np.abs(lam).sum()) if negative.any() else 0.0
    lam = np.maximum(lam, 0.0)
    scale = np.sqrt(lam / lam.size)
    scale.setflags(write=False)
    return scale, clipped


def _fast_len(n: int) -> int:
    from scipy.fft import next_fast_len

    return next_fast_len(int(n))


def simulate_gaussian_field(rho, grid: RasterGrid, seed) -> np.ndarray:
    """Stationary standard Gaussian field on the grid by circulant embedding.

    ``rho`` is a :class:`SamplingFieldModel` or a unit-sill VariogramModel;
    ``seed`` an integer or a ``numpy`` Generator.  Returns ``(nrows, ncols)``.
    """
    model = rho.correlation if isinstance(rho, SamplingFieldModel) else rho
    scale, clipped = _embedding_spectrum(model, grid.nrows, grid.ncols, float(grid.cell_size))
    if clipped > 0:
        warnings.warn(f"circulant embedding clipped {clipped:.3g} of the spectral mass",
                      SpectralApproximationWarning, stacklevel=2)
    rng = seed if isinstance(seed, np.random.Generator) else derive_rng(seed, "field")
    xi = rng.standard_normal(scale.shape) + 1j * rng.standard_normal(scale.shape)
    y = np.fft.fft2(scale * xi)
    return np.ascontiguousarray(y.real[: grid.nrows, : grid.ncols])


# ---------------------------------------------------------------- data conditioning

@dataclass(frozen=True)
class DataConditioning:
    """Uniform and Gaussian intervals that reproduce each datum's matched atom."""

    u_low: np.ndarray
    u_high: np.ndarray
    g_low: np.ndarray
    g_high: np.ndarray
    matched: np.ndarray
    mismatch: np.ndarray

    @property
    def n(self) -> int:
        return self.u_low.shape[0]

    @property
    def n_mismatched(self) -> int:
        return int(np.count_nonzero(self.mismatch))


def match_atom(cdf: StepCDF, value: float):
    """``(matched_value, before, at)``; exact atom if present, else the nearest one."""
    hit = cdf.atom_interval(value)
    if hit is not None:
        return float(value), hit[0], hit[1]
    atoms = np.unique(cdf.values)
    nearest = float(atoms[np.argmin(np.abs(atoms - value))])
    before, at = cdf.atom_interval(nearest)
    return nearest, before, at


def conditioning_from_cdfs(cdfs, z) -> DataConditioning:
    z = np.asarray(z, dtype=float)
    m = np.empty(z.size)
    lo = np.empty(z.size)
    hi = np.empty(z.size)
    for i, (cdf, zi) in enumerate(zip(cdfs, z)):
        m[i], lo[i], hi[i] = match_atom(cdf, zi)
    lo = np.clip(lo, 0.0, 1.0)
    hi = np.clip(hi, 0.0, 1.0)
    narrow = hi - lo < INTERVAL_WIDEN
    lo = np.where(narrow, np.maximum(lo - INTERVAL_WIDEN, 0.0), lo)
    hi = np.where(narrow, np.minimum(hi + INTERVAL_WIDEN, 1.0), hi)
    return DataConditioning(lo, hi, ndtri(lo), ndtri(hi), m, np.abs(m - z))


def data_intervals(model: EmberModel) -> DataConditioning:
    """Cumulative-weight jump ``(before, at]`` of the atom matched to each datum."""
    rows = _data_rows(model)
    return conditioning_from_cdfs((rows.row_cdf(i) for i in range(rows.m)), model.samples.z)


def _truncated_normal(mu, sd, a, b, u):
    """Inverse-CDF draw of N(mu, sd^2) truncated to [a, b], tail-stable."""
    alpha = (a - mu) / sd
    beta = (b - mu) / sd
    upper = alpha > 0
    # upper tail: work with survival probabilities
    pa = np.where(upper, ndtr(-alpha), ndtr(alpha))
    pb = np.where(upper, ndtr(-beta), ndtr(beta))
    t = pa + u * (pb - pa)
    x = np.where(upper, -ndtri(t), ndtri(t))
    x = np.where(np.isfinite(x), x, np.where(np.isfinite(alpha), alpha, beta))
    return mu + sd * np.clip(x, alpha, beta)


def gibbs_truncated_gaussian(precision, g_low, g_high, rngs, sweeps: int) -> np.ndarray:
    """Gibbs sampling of ``N(0, P^-1)`` truncated to a box, one chain per generator.

    Returns the final state of every chain, shape ``(n_chains, n)``.
    """
    Q = np.asarray(precision, dtype=float)
    n = Q.shape[0]
    k = len(rngs)
    lo = np.asarray(g_low, dtype=float)
    hi = np.asarray(g_high, dtype=float)
    uniforms = np.stack([r.random((sweeps, n)) for r in rngs], axis=2)  # (sweeps, n, k)
    both = np.isfinite(lo) & np.isfinite(hi)
    start = np.clip(0.0, lo, hi)
    start[both] = 0.5 * (lo[both] + hi[both])
    g = np.repeat(start[:, None], k, axis=1)
    s = Q @ g
    qd = np.diag(Q).copy()
    sd = 1.0 / np.sqrt(qd)
    for sweep in range(sweeps):
        for i in range(n):
            mu = g[i] - s[i] / qd[i]
            new = _truncated_normal(mu, sd[i], lo[i], hi[i], uniforms[sweep, i])
            delta = new - g[i]
            s += Q[:, i, None] * delta[None, :]
            g[i] = new
    return g.T.copy()


def _correlation_system(rho: SamplingFieldModel, locations) -> KrigingSystem:
    locations = np.atleast_2d(locations)
    return KrigingSystem(locations, np.zeros(locations.shape[0]), rho.correlation, mean=0.0)


def sample_conditioning_values(cond: DataConditioning, rho: SamplingFieldModel, locations,
                               seed, burn_in: int = 100, chains=(0,)) -> np.ndarray:
    """Truncated Gaussian values at the data; one row per chain index in ``chains``.

    Chain ``k`` uses the stream ``(seed, 'gibbs', k)``; a single chain returns a vector.
    """
    if cond.n == 0:
        return np.zeros((len(chains), 0)) if len(chains) != 1 else np.zeros(0)
    P = _correlation_system(rho, locations).precision
    g = gibbs_truncated_gaussian(P, cond.g_low, cond.g_high,
                                 [derive_rng(seed, "gibbs", int(c)) for c in chains], burn_in)
    return g[0] if len(chains) == 1 else g


def _condition_fields(Xu, g, rho, grid, data_cells, data_locs):
    """Residual conditioning for a stack of fields ``Xu`` (k, nrows, ncols)."""
    k = Xu.shape[0]
    flat = Xu.reshape(k, -1).copy()
    if data_cells.size == 0:
        return flat.reshape(Xu.shape)
    sys = _correlation_system(rho, data_locs)
    resid = g - flat[:, data_cells]                 # (k, n)
    b = sys.solve(resid.T)                          # (n, k)
    centers = grid.cell_centers()
    for s in range(0, centers.shape[0], _CHUNK):
        c = sys.cross_covariance(centers[s:s + _CHUNK])   # (n, m)
        flat[:, s:s + _CHUNK] += (c.T @ b).T
    flat[:, data_cells] = g
    return flat.reshape(Xu.shape)


def conditional_uniform_field(X_unconditional, g, rho, grid: RasterGrid, locations) -> np.ndarray:
    """``U = G(X_u + SK(g - X_u(data)))``; data cells get ``G(g_i)`` exactly."""
    Xu = np.asarray(X_unconditional, dtype=float)[None]
    g = np.asarray(g, dtype=float).reshape(1, -1)
    rho = rho if isinstance(rho, SamplingFieldModel) else SamplingFieldModel(rho)
    locations = np.asarray(locations, dtype=float).reshape(-1, 2)
    cells = grid.flat_index(locations) if locations.shape[0] else np.zeros(0, dtype=np.int64)
    snapped = grid.cell_centers()[cells]
    return ndtr(_condition_fields(Xu, g, rho, grid, cells, snapped)[0])


# ---------------------------------------------------------------- simulation

@dataclass
class Realization:
    grid: RasterGrid
    seed: int
    index: int
    diagnostics: dict = field(default_factory=dict)

    @property
    def values(self) -> np.ndarray:
        return self.grid.layers["sim"]


def _unique_cells(cells):
    _, first = np.unique(cells, return_index=True)
    keep = np.zeros(cells.size, dtype=bool)
    keep[first] = True
    return keep


def simulate(model: EmberModel, grid: RasterGrid, rho: SamplingFieldModel | None = None,
             n_real: int | None = None, seed: int | None = None,
             burn_in: int | None = None) -> list[Realization]:
    """Conditional realizations drawn from the envelopes with a correlated uniform field.

    Realization ``k`` uses the streams ``(seed, 'gibbs', k)`` and
    ``(seed, 'field', k)``.  Every data cell holds its matched atom.
    """
    cfg = model.config
    n_real = cfg.n_realizations if n_real is None else int(n_real)
    seed = cfg.seed if seed is None else int(seed)
    burn_in = cfg.gibbs_burn_in if burn_in is None else int(burn_in)
    if rho is None:
        rho = infer_sampling_correlation(model, cfg.hermite_order)
    features, valid = grid_features(model, grid)
    cond = data_intervals(model)

    cells = grid.flat_index(model.samples.coords[:, :2])
    keep = _unique_cells(cells)
    if not np.all(np.isin(cells, valid)):
        raise ValidationError("a datum lies in a cell without secondary data")
    kc = DataConditioning(*(np.asarray(a)[keep] for a in (
        cond.u_low, cond.u_high, cond.g_low, cond.g_high, cond.matched, cond.mismatch)))
    data_cells = cells[keep]
    snapped = grid.cell_centers()[data_cells]

    chains = list(range(n_real))
    g = sample_conditioning_values(kc, rho, snapped, seed, burn_in, chains).reshape(n_real, -1)
    Xu = np.stack([simulate_gaussian_field(rho, grid, derive_rng(seed, "field", k))
                   for k in range(n_real)])
    U = ndtr(_condition_fields(Xu, g, rho, grid, data_cells, snapped)).reshape(n_real, -1)

    sims = np.full((n_real, grid.nrows * grid.ncols), np.nan)
    for s in range(0, valid.size, 8192):
        rows = envelope_rows(model, features[s:s + 8192])
        c = valid[s:s + 8192]
        sims[:, c] = rows.quantiles(U[:, c].T).T
    out = []
    for k in range(n_real):
        off_atom = int(np.count_nonzero(sims[k, data_cells] != kc.matched))
        sims[k, data_cells] = kc.matched
        diag = {
            "data_cells": int(data_cells.size),
            "data_sharing_cells": int((~keep).sum()),
            "atom_mismatches": kc.n_mismatched,
            "max_atom_mismatch": float(kc.mismatch.max(initial=0.0)),
            "cells_overwritten": off_atom,
            "spectral_clipped_fraction": _embedding_spectrum(
                rho.correlation, grid.nrows, grid.ncols, float(grid.cell_size))[1],
            "gibbs_sweeps": burn_in,
            "u_data": ndtr(g[k]).tolist(),
        }
        layer = grid.geometry().with_layers({"sim": sims[k].reshape(grid.shape)})
        out.append(Realization(layer, seed, k, diag))
    return out


def posterior_mean(realizations) -> RasterGrid:
    """Cellwise average of realizations sharing one geometry."""
    realizations = list(realizations)
    if not realizations:
        raise ValidationError("need at least one realization")
    first = realizations[0].grid
    for r in realizations[1:]:
        if not r.grid.same_geometry(first):
            raise ValidationError("realizations have different grid geometry")
    mean = np.mean([r.values for r in realizations], axis=0)
    return first.geometry().with_layers({"mean": mean})
