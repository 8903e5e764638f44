"""Synthetic test cases, a Gaussian baseline and the comparison harness.

* Example 1: ``Z = 0.7904 S + 0.6069 R`` with ``S`` (gaussian, range 100)
  observed everywhere and ``R`` (spherical, range 70) hidden.
* Example 2: a folded smooth surface with cusp lines; secondaries are its
  3x3 Sobel derivatives and a radius-50 disk average.
* Example 3: white noise whose local standard deviation is the Example 2
  surface, rescaled so that about 3% of cells exceed 3.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage, optimize, signal
from scipy.special import ndtr, ndtri
from scipy.stats import spearmanr

from .core import RasterGrid, RunConfig, SampleSet, derive_rng, save_grayscale, save_grid
from .embedding import estimate_grid, train_ember
from .errors import ConfigurationError, ValidationError
from .kriging import KrigingSystem
from .simulation import (
    SamplingFieldModel,
    _condition_fields,
    infer_sampling_correlation,
    simulate,
    simulate_gaussian_field,
)
from .variogram import VariogramModel

LAMBDA = 0.7904
MU = 0.6069
S_MODEL = VariogramModel("gaussian", 1.0, 100.0, 0.0)
R_MODEL = VariogramModel("spherical", 1.0, 70.0, 0.0)
GRID_SIZE = 300
DISK_RADIUS = 50
EXAMPLE3_THRESHOLD = 3.0
EXAMPLE3_EXCEEDANCE = 0.03
EXAMPLE3_SAMPLES = 20000
# one mtry for every method so comparisons differ only in the embedded columns
EXPERIMENT_MTRY = 2
EXPERIMENTS = ("example1_800", "example1_200", "example1_50", "example2_800", "example2_50",
               "example3")


def default_grid(size: int = GRID_SIZE) -> RasterGrid:
    return RasterGrid((0.0, 0.0), 1.0, size, size)


def _sample_cells(grid: RasterGrid, n: int, rng) -> np.ndarray:
    ncell = grid.nrows * grid.ncols
    if n > ncell:
        raise ValidationError(f"cannot draw {n} distinct cells from {ncell}")
    return np.sort(rng.choice(ncell, size=n, replace=False))


def samples_from_grids(grid: RasterGrid, cells, truth, secondaries: dict) -> SampleSet:
    coords = grid.cell_centers()[cells]
    names = tuple(secondaries)
    y = np.column_stack([secondaries[k].ravel()[cells] for k in names]) if names else None
    return SampleSet(coords, truth.ravel()[cells], y if y is not None else np.zeros((len(cells), 0)),
                     names)


# ---------------------------------------------------------------- example 1

def gen_example1(grid: RasterGrid | None = None, n_samples: int = 800, seed: int = 0):
    """Truth ``Z``, secondary ``S`` and samples at uniform-random distinct cells.

    ``S`` and ``R`` are unit-variance fields; the sample cells are drawn from a
    stream independent of ``n_samples`` draws of the fields.
    """
    grid = default_grid() if grid is None else grid
    S = simulate_gaussian_field(S_MODEL, grid, derive_rng(seed, "example1", 0))
    R = simulate_gaussian_field(R_MODEL, grid, derive_rng(seed, "example1", 1))
    Z = LAMBDA * S + MU * R
    cells = _sample_cells(grid, n_samples, derive_rng(seed, "example1-cells", n_samples))
    truth = grid.geometry().with_layers({"Z": Z})
    secondary = grid.geometry().with_layers({"S": S})
    return truth, secondary, samples_from_grids(grid, cells, Z, {"S": S})


# ---------------------------------------------------------------- example 2

def sobel_x(img) -> np.ndarray:
    return ndimage.sobel(np.asarray(img, dtype=float), axis=1, mode="nearest")


def sobel_y(img) -> np.ndarray:
    return ndimage.sobel(np.asarray(img, dtype=float), axis=0, mode="nearest")


def disk_kernel(radius: float) -> np.ndarray:
    r = int(np.floor(radius))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (xx**2 + yy**2 <= radius**2).astype(float)


def disk_mean(img, radius: float = DISK_RADIUS) -> np.ndarray:
    """Moving average over a disk, normalized by the in-image part of the disk."""
    img = np.asarray(img, dtype=float)
    k = disk_kernel(radius)
    num = signal.fftconvolve(img, k, mode="same")
    den = signal.fftconvolve(np.ones_like(img), k, mode="same")
    return num / np.maximum(np.rint(den), 1.0)


def example2_surface(size: int = GRID_SIZE):
    """Stand-in truth image and the signed field whose zero set holds its cusps.

    A broad smooth surface ``g`` plus ``|tanh(3 b)|``: flat away from the zero
    lines of ``b`` and folded into sharp V-shaped valleys along them.
    """
    c = np.arange(size) + 0.5
    X, Y = np.meshgrid(c, size - c)
    u, v = X / size, Y / size
    g = (np.sin(2 * np.pi * (u + 0.3 * v) / 0.9) + 0.6 * np.cos(2 * np.pi * (v - 0.2 * u) / 0.7)
         + 0.5 * (u - v))
    r = np.hypot(u - 0.45, v - 0.55)
    b = (np.cos(2 * np.pi * r / 0.42)
         + 0.6 * np.sin(2 * np.pi * (u + 0.3 * v) / 0.55) * np.cos(2 * np.pi * v / 0.7))
    return 10.0 * (g + np.abs(np.tanh(3.0 * b))), b


def cusp_mask(signed, width: float = 10.0) -> np.ndarray:
    """Cells within ``width`` cells of a sign change of ``signed``."""
    s = np.sign(signed)
    edge = np.zeros(s.shape, dtype=bool)
    edge[:, 1:] |= s[:, 1:] != s[:, :-1]
    edge[:, :-1] |= s[:, 1:] != s[:, :-1]
    edge[1:, :] |= s[1:, :] != s[:-1, :]
    edge[:-1, :] |= s[1:, :] != s[:-1, :]
    return ndimage.distance_transform_edt(~edge) <= width


def example2_secondaries(truth) -> dict:
    return {"sobel_x": sobel_x(truth), "sobel_y": sobel_y(truth), "smooth": disk_mean(truth)}


def gen_example2(seed: int = 0, sizes=(50, 800), grid_size: int = GRID_SIZE):
    """Truth grid (with a ``cusp`` mask layer), secondary grid and one SampleSet per size."""
    T, f = example2_surface(grid_size)
    grid = default_grid(grid_size)
    sec = example2_secondaries(T)
    truth = grid.geometry().with_layers({"Z": T, "signed": f})
    secondary = grid.geometry().with_layers(sec)
    samples = {}
    for n in sizes:
        cells = _sample_cells(grid, n, derive_rng(seed, "example2-cells", n))
        samples[n] = samples_from_grids(grid, cells, T, sec)
    return truth, secondary, samples


# ---------------------------------------------------------------- example 3

def example3_std_field(truth, threshold: float = EXAMPLE3_THRESHOLD,
                       exceedance: float = EXAMPLE3_EXCEEDANCE, floor: float = 0.1) -> np.ndarray:
    """Affine map of ``truth`` onto ``[floor, floor + c]`` such that the mean of
    ``P(N(0, Y^2) > threshold)`` over cells equals ``exceedance``."""
    t = np.asarray(truth, dtype=float)
    t = (t - t.min()) / (t.max() - t.min())

    def excess(c):
        return float(np.mean(ndtr(-threshold / (floor + c * t)))) - exceedance

    c = optimize.brentq(excess, 1e-6, 1e3, xtol=1e-12)
    return floor + c * t


def gen_example3(grid: RasterGrid | None = None, n_samples: int = EXAMPLE3_SAMPLES, seed: int = 0,
                 std_field=None, secondaries: dict | None = None,
                 threshold: float = EXAMPLE3_THRESHOLD):
    """Heteroscedastic white noise ``Z ~ N(0, Y(x)^2)`` per cell.

    Without ``std_field`` the Example 2 surface is rescaled into ``Y`` and its
    secondaries are reused.  Returns ``(Y grid, truth grid with Z and the
    exceedance indicator, secondary grid, SampleSet)``.
    """
    if std_field is None:
        size = GRID_SIZE if grid is None else grid.nrows
        T, _ = example2_surface(size)
        std_field = example3_std_field(T, threshold)
        if secondaries is None:
            secondaries = example2_secondaries(T)
    std_field = np.asarray(std_field, dtype=float)
    if np.any(std_field < 0):
        raise ValidationError("standard deviation field must be non-negative")
    grid = default_grid(std_field.shape[0]) if grid is None else grid
    if std_field.shape != grid.shape:
        raise ValidationError("std field does not match grid")
    secondaries = {} if secondaries is None else secondaries
    Z = std_field * derive_rng(seed, "example3-noise").standard_normal(grid.shape)
    cells = _sample_cells(grid, n_samples, derive_rng(seed, "example3-cells", n_samples))
    ygrid = grid.geometry().with_layers({"Y": std_field})
    truth = grid.geometry().with_layers({"Z": Z, "indicator": (Z > threshold).astype(float)})
    secondary = grid.geometry().with_layers(secondaries)
    return ygrid, truth, secondary, samples_from_grids(grid, cells, Z, secondaries)


# ---------------------------------------------------------------- metrics

def _values(a):
    if isinstance(a, RasterGrid):
        if len(a.layers) != 1:
            raise ValidationError("grid has several layers; pass the array")
        return next(iter(a.layers.values()))
    return np.asarray(a, dtype=float)


def _errors(estimate, truth, mask=None):
    e, t = _values(estimate), _values(truth)
    if e.shape != t.shape:
        raise ValidationError("estimate and truth differ in shape")
    keep = np.isfinite(e) & np.isfinite(t)
    if mask is not None:
        keep &= np.asarray(mask, dtype=bool)
    if not keep.any():
        raise ValidationError("no cells to evaluate")
    return (e - t)[keep]


def metric_mse(estimate, truth, mask=None) -> float:
    err = _errors(estimate, truth, mask)
    return float(np.mean(err**2))


def metric_iqr(estimate, truth, mask=None) -> float:
    q75, q25 = np.percentile(_errors(estimate, truth, mask), [75, 25])
    return float(q75 - q25)


# ---------------------------------------------------------------- baseline

@dataclass(frozen=True)
class BaselineModel:
    """Gaussian model ``Z = m_Z + b (S - m_S) + W`` with ``W`` independent of ``S``.

    ``residual`` is the covariance of ``W``.  ``b = 0`` gives simple kriging
    with ``residual`` as the covariance of ``Z``.
    """

    residual: VariogramModel
    slope: float = 0.0
    secondary: str | None = None


def example1_baseline(lam: float = LAMBDA, mu: float = MU) -> BaselineModel:
    return BaselineModel(VariogramModel("spherical", mu**2, R_MODEL.essential_range, 0.0), lam, "S")


def _secondary_field(model: BaselineModel, samples: SampleSet, secondary: RasterGrid | None, grid):
    if model.slope == 0.0:
        return 0.0, np.zeros(grid.nrows * grid.ncols), np.zeros(samples.n)
    if secondary is None or model.secondary not in secondary.layers:
        raise ConfigurationError(f"baseline needs secondary layer {model.secondary!r}")
    s_grid = secondary.layers[model.secondary].ravel()
    s_data = samples.y[:, samples.names.index(model.secondary)]
    return float(s_data.mean()), s_grid, s_data


def baseline_estimate(samples: SampleSet, secondary: RasterGrid | None, model: BaselineModel,
                      grid: RasterGrid) -> np.ndarray:
    """Collocated cokriging in residual form; exact at the data."""
    m_s, s_grid, s_data = _secondary_field(model, samples, secondary, grid)
    m_z = float(samples.z.mean())
    resid = samples.z - m_z - model.slope * (s_data - m_s)
    sys = KrigingSystem(samples.coords, resid, model.residual, mean=0.0)
    centers = grid.cell_centers()
    out = np.empty(centers.shape[0])
    b = sys.dual_coefficients
    for s in range(0, centers.shape[0], 4096):
        out[s:s + 4096] = sys.cross_covariance(centers[s:s + 4096]).T @ b
    out += m_z + model.slope * (s_grid - m_s)
    return out.reshape(grid.shape)


def normal_scores(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    order = np.argsort(z, kind="stable")
    rank = np.empty(z.size)
    rank[order] = np.arange(z.size)
    return ndtri((rank + 0.5) / z.size)


def back_transform(y, z_data) -> np.ndarray:
    """Map Gaussian values to data units through the sorted data and their scores."""
    zs = np.sort(np.asarray(z_data, dtype=float))
    ys = ndtri((np.arange(zs.size) + 0.5) / zs.size)
    return np.interp(y, ys, zs)


def baseline_simulate(samples: SampleSet, secondary: RasterGrid | None, model: BaselineModel,
                      grid: RasterGrid, n_real: int, seed: int) -> np.ndarray:
    """Conditional Gaussian simulation after a normal-score transform.

    In Gaussian units the secondary slope is ``b / sqrt(b^2 + sill_W)`` on the
    standardized secondary, and the residual keeps the remaining variance.
    """
    m_s, s_grid, s_data = _secondary_field(model, samples, secondary, grid)
    total = model.slope**2 + model.residual.total_sill
    b = model.slope / np.sqrt(total)
    if model.slope != 0.0:
        sd = float(s_grid.std())
        s_grid = (s_grid - s_grid.mean()) / sd
        s_data = (s_data - secondary.layers[model.secondary].mean()) / sd
    rvar = 1.0 - b**2
    rmodel = VariogramModel(model.residual.kind, rvar * model.residual.sill / model.residual.total_sill,
                            model.residual.essential_range,
                            rvar * model.residual.nugget / model.residual.total_sill)
    y = normal_scores(samples.z)
    resid = y - b * s_data
    cells = grid.flat_index(samples.coords)
    snapped = grid.cell_centers()[cells]
    corr = SamplingFieldModel(rmodel.correlation_form())
    scale = np.sqrt(rvar)
    Xu = np.stack([simulate_gaussian_field(corr, grid, derive_rng(seed, "baseline-field", k))
                   for k in range(n_real)])
    g = np.repeat((resid / scale)[None], n_real, axis=0)
    Xc = _condition_fields(Xu, g, corr, grid, cells, snapped).reshape(n_real, -1)
    ysim = b * s_grid[None] + scale * Xc
    return back_transform(ysim, samples.z).reshape((n_real,) + grid.shape)


def baseline_gaussian(samples: SampleSet, secondary: RasterGrid | None, model: BaselineModel,
                      grid: RasterGrid, seed: int = 0, n_real: int = 1):
    """``(estimate, simulations)`` for the Gaussian reference method."""
    est = baseline_estimate(samples, secondary, model, grid)
    sims = baseline_simulate(samples, secondary, model, grid, n_real, seed) if n_real > 0 else None
    return est, sims


# ---------------------------------------------------------------- harness

@dataclass
class ExperimentReport:
    name: str
    seed: int
    config: dict
    methods: dict = field(default_factory=dict)
    importance: dict = field(default_factory=dict)
    runtime: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    grids: dict = field(default_factory=dict, repr=False)
    # in-memory objects for callers that need more than the summary; never serialized
    artifacts: dict = field(default_factory=dict, repr=False)

    def to_dict(self, include_runtime: bool = True) -> dict:
        d = {"name": self.name, "seed": self.seed, "config": self.config, "methods": self.methods,
             "importance": self.importance, "extra": self.extra}
        if include_runtime:
            d["runtime_seconds"] = self.runtime
        return d

    def to_json(self, include_runtime: bool = True) -> str:
        return json.dumps(self.to_dict(include_runtime), indent=1, sort_keys=True)

    def save(self, out_dir, images: bool = False) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json(include_runtime=False) + "\n", encoding="utf-8")
        (out / "runtime.json").write_text(json.dumps(self.runtime, indent=1, sort_keys=True) + "\n",
                                          encoding="utf-8")
        grid = default_grid(next(iter(self.grids.values())).shape[0]) if self.grids else None
        for name, arr in sorted(self.grids.items()):
            save_grid(grid.geometry().with_layers({name: arr}), out / f"{name}.asc", name)
            if images:
                save_grayscale(arr, out / f"{name}.pgm")


def _method_metrics(est, sims, truth) -> dict:
    d = {"estimation_mse": metric_mse(est, truth), "estimation_iqr": metric_iqr(est, truth)}
    if sims is not None and len(sims):
        mses = [metric_mse(s, truth) for s in sims]
        iqrs = [metric_iqr(s, truth) for s in sims]
        d.update({
            "simulation_mse": float(np.mean(mses)),
            "simulation_iqr": float(np.mean(iqrs)),
            "simulation_mse_first": float(mses[0]),
        })
    return d


def _run_ember(label, samples, secondary, truth, grid, config, specs, simulate_too, report,
               outputs=("mean", "std")):
    t0 = time.perf_counter()
    model = train_ember(samples, specs, config)
    est = estimate_grid(model, grid.geometry().with_layers(secondary.layers), outputs)
    sims = None
    reals = []
    if simulate_too:
        rho = infer_sampling_correlation(model, config.hermite_order)
        reals = simulate(model, secondary, rho, config.n_realizations, config.seed)
        sims = np.stack([r.values for r in reals])
        report.extra[f"{label}_sampling_correlation"] = rho.correlation.to_dict()
        report.extra[f"{label}_atom_mismatches"] = reals[0].diagnostics["atom_mismatches"]
        report.grids[f"{label}_sim_0"] = sims[0]
    report.runtime[label] = time.perf_counter() - t0
    report.artifacts[label] = {"model": model, "realizations": reals, "samples": samples}
    report.methods[label] = _method_metrics(est.layers["mean"], sims, truth)
    report.importance[label] = model.importance()
    for name, arr in est.layers.items():
        report.grids[f"{label}_{name.replace(':', '_')}"] = arr
    return model, est


def run_experiment(name: str, config: RunConfig | None = None, seed: int = 0,
                   simulate_too: bool = True) -> ExperimentReport:
    """Run Ember, the plain ensemble and (where applicable) the Gaussian baseline."""
    if name not in EXPERIMENTS:
        raise ConfigurationError(f"unknown experiment {name!r}; choose from {EXPERIMENTS}")
    config = RunConfig(seed=seed, mtry=EXPERIMENT_MTRY) if config is None else config
    report = ExperimentReport(name, seed, config.to_dict())
    family, _, size = name.partition("_")

    if family == "example1":
        n = int(size)
        truth, secondary, samples = gen_example1(None, n, seed)
        grid = truth.geometry()
        Z = truth.layers["Z"]
        report.grids["truth"] = Z
        _run_ember("ember", samples, secondary, Z, grid, config, None, simulate_too, report)
        _run_ember("ensemble", samples, secondary, Z, grid, config, [], simulate_too, report)
        t0 = time.perf_counter()
        est, sims = baseline_gaussian(samples, secondary, example1_baseline(), grid, seed,
                                      config.n_realizations if simulate_too else 0)
        report.runtime["baseline"] = time.perf_counter() - t0
        report.artifacts["baseline"] = {"simulations": sims, "samples": samples}
        report.methods["baseline"] = _method_metrics(est, sims, Z)
        report.grids["baseline_mean"] = est
        return report

    if family == "example2":
        n = int(size)
        truth, secondary, samples = gen_example2(seed, sizes=(n,))
        grid = truth.geometry()
        Z = truth.layers["Z"]
        report.grids["truth"] = Z
        _, est = _run_ember("ember", samples[n], secondary, Z, grid, config, None, simulate_too,
                            report)
        _run_ember("ensemble", samples[n], secondary, Z, grid, config, [], False, report)
        near = cusp_mask(truth.layers["signed"])
        std = est.layers["std"]
        report.extra["std_near_cusps"] = float(np.nanmean(std[near]))
        report.extra["std_elsewhere"] = float(np.nanmean(std[~near]))
        imp = report.importance["ember"]
        report.extra["importance_ranking"] = sorted(imp, key=imp.get, reverse=True)
        return report

    ygrid, truth, secondary, samples = gen_example3(None, EXAMPLE3_SAMPLES, seed)
    grid = truth.geometry()
    Z = truth.layers["Z"]
    thr = f"prob_gt:{EXAMPLE3_THRESHOLD:g}"
    report.grids["truth"] = Z
    report.grids["true_std"] = ygrid.layers["Y"]
    # white-noise target: kriging carries no information, and 20k-point systems are too large
    _, est = _run_ember("ember", samples, secondary, Z, grid, config, [], False, report,
                        outputs=("mean", "std", thr))
    report.extra["embedded_models"] = 0
    smooth_ind = disk_mean(truth.layers["indicator"], 5)
    report.extra["exceedance_fraction"] = float(truth.layers["indicator"].mean())
    report.extra["exceedances_in_samples"] = int((samples.z > EXAMPLE3_THRESHOLD).sum())
    report.extra["spearman_std_vs_true_std"] = float(
        spearmanr(est.layers["std"].ravel(), ygrid.layers["Y"].ravel())[0])
    report.extra["spearman_prob_vs_smoothed_indicator"] = float(
        spearmanr(est.layers[thr].ravel(), smooth_ind.ravel())[0])
    return report


def importance_table(report: ExperimentReport, method: str = "ember") -> list[tuple[str, float]]:
    imp = report.importance[method]
    return sorted(imp.items(), key=lambda kv: kv[1], reverse=True)

