"""Command-line front end: ``ember {train,estimate,simulate,experiment,variogram}``.

Exit codes: 0 success, 1 runtime or numerical failure, 2 configuration or I/O
failure.  Inputs are described by a YAML file::

    samples: data.csv            # x,y,value[,secondary...]
    secondary: {S: s.asc}        # ESRI ASCII grids, one per secondary variable
    model: model.zip             # read by estimate / simulate
    embedded:                    # omit for defaults, [] for a plain forest
      - {label: long_range, kind: exponential, sill: 1.0, essential_range: 150}
    run: {n_trees: 100, seed: 7} # any RunConfig field
    outputs: [mean, std, q10, q90, "prob_gt:3"]
    simulation: {correlation: {kind: exponential, essential_range: 30}}
    variogram: {n_bins: 20, max_lag: 100, kinds: [spherical, exponential]}
    images: false                # also write 8-bit PGM previews
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .core import (
    RasterGrid,
    RunConfig,
    SampleSet,
    attach_secondary,
    load_grid,
    load_samples,
    save_grayscale,
    save_grid,
)
from .embedding import (
    EmbeddedModelSpec,
    estimate_grid,
    load_model,
    parse_output,
    save_model,
    train_ember,
)
from .errors import ConfigurationError, EmberError, ParseError, ValidationError
from .experiments import EXPERIMENT_MTRY, EXPERIMENTS, run_experiment
from .kriging import loo_cross_validate
from .simulation import SamplingFieldModel, infer_sampling_correlation, simulate
from .variogram import VariogramModel, empirical_variogram, fit_variogram

log = logging.getLogger("ember")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
_KNOWN_KEYS = {"samples", "secondary", "model", "embedded", "run", "outputs", "simulation",
               "variogram", "images"}


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def load_config(path) -> dict:
    """Read the YAML config; relative paths resolve against its directory."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        cfg = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ParseError(f"invalid YAML ({exc.__class__.__name__})", path) from None
    if not isinstance(cfg, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    unknown = set(cfg) - _KNOWN_KEYS
    if unknown:
        raise ConfigurationError(f"{path}: unknown keys {sorted(unknown)}")
    cfg["_base"] = path.parent
    return cfg


def _path(cfg, value) -> Path:
    p = Path(value)
    return p if p.is_absolute() else cfg.get("_base", Path(".")) / p


def run_config(cfg, args) -> RunConfig:
    run = dict(cfg.get("run") or {})
    if args.seed is not None:
        run["seed"] = args.seed
    if args.threads is not None:
        run["n_jobs"] = args.threads
    if "thresholds" in run:
        run["thresholds"] = tuple(run["thresholds"])
    try:
        return RunConfig.from_dict(run)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None


def _secondary_grids(cfg) -> dict:
    sec = cfg.get("secondary") or {}
    if isinstance(sec, list):
        sec = {Path(p).stem: p for p in sec}
    grids = {}
    for name, p in sec.items():
        g = load_grid(_path(cfg, p))
        grids[name] = RasterGrid(g.origin, g.cell_size, g.ncols, g.nrows,
                                 {name: next(iter(g.layers.values()))}, g.nodata_value)
    return grids


def _stack(grids: dict) -> RasterGrid:
    if not grids:
        raise ConfigurationError("no secondary grids given")
    first = next(iter(grids.values()))
    layers = {}
    for name, g in grids.items():
        if not g.same_geometry(first):
            raise ConfigurationError(f"grid {name!r} differs in geometry from the others")
        layers.update(g.layers)
    return first.geometry().with_layers(layers)


def _samples(cfg) -> SampleSet:
    if "samples" not in cfg:
        raise ConfigurationError("config lacks 'samples'")
    samples = load_samples(_path(cfg, cfg["samples"]))
    grids = _secondary_grids(cfg)
    if grids and not samples.names:
        samples = attach_secondary(samples.coords, samples.z, list(grids.values()), list(grids))
    return samples


def _specs(cfg):
    if "embedded" not in cfg or cfg["embedded"] is None:
        return None
    try:
        return [EmbeddedModelSpec.from_dict(d) for d in cfg["embedded"]]
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"bad embedded model entry: {exc}") from None


def _safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name).strip("_")


def _write_layers(grid: RasterGrid, out: Path, images: bool) -> list[str]:
    written = []
    for name in grid.layers:
        stem = _safe_name(name)
        save_grid(grid, out / f"{stem}.asc", name)
        if images:
            save_grayscale(grid.layers[name], out / f"{stem}.pgm")
        written.append(f"{stem}.asc")
    return written


def _effective(cfg, config: RunConfig) -> dict:
    echo = {k: v for k, v in cfg.items() if not k.startswith("_") and k != "run"}
    echo["run"] = config.to_dict()
    return json.loads(json.dumps(echo, default=str))


def _model_path(cfg, args) -> Path:
    if args.model:
        return Path(args.model)
    if "model" not in cfg:
        raise ConfigurationError("no model given (config 'model' or --model)")
    return _path(cfg, cfg["model"])


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    config = run_config(cfg, args)
    samples = _samples(cfg)
    model = train_ember(samples, _specs(cfg), config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "model.zip")
    loo = {}
    for spec, sys_ in zip(model.specs, model.systems):
        cv = loo_cross_validate(sys_)
        loo[spec.label] = {
            "mse": float(np.mean(cv.innovations**2)),
            "mean_standardized_sq": float(np.mean(cv.innovations**2 / cv.variances)),
        }
    report = {
        "n_samples": samples.n,
        "features": list(model.feature_names),
        "importance": model.importance(),
        "embedded": [s.to_dict() for s in model.specs],
        "loo": loo,
        "config": _effective(cfg, config),
    }
    (out / "train_report.json").write_text(_dump(report), encoding="utf-8")
    log.info("model written to %s", out / "model.zip")
    return EXIT_OK


def cmd_estimate(args) -> int:
    cfg = load_config(args.config)
    config = run_config(cfg, args)
    model = load_model(_model_path(cfg, args))
    outputs = cfg.get("outputs") or ["mean", "std"]
    for o in outputs:
        parse_output(str(o))
    grid = _stack(_secondary_grids(cfg))
    result = estimate_grid(model, grid, [str(o) for o in outputs])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = _write_layers(result, out, bool(cfg.get("images")))
    report = {"layers": files, "config": _effective(cfg, config)}
    (out / "estimate_report.json").write_text(_dump(report), encoding="utf-8")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    config = run_config(cfg, args)
    model = load_model(_model_path(cfg, args))
    grid = _stack(_secondary_grids(cfg))
    sim_cfg = dict(cfg.get("simulation") or {})
    n_real = int(args.n_real if args.n_real is not None
                 else sim_cfg.get("n_realizations", config.n_realizations))
    if "correlation" in sim_cfg:
        rho = SamplingFieldModel(VariogramModel.from_dict(sim_cfg["correlation"]).correlation_form(),
                                 config.hermite_order)
    else:
        rho = infer_sampling_correlation(model, config.hermite_order)
    reals = simulate(model, grid, rho, n_real, config.seed, config.gibbs_burn_in)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    images = bool(cfg.get("images"))
    lines = [f"sampling_correlation {json.dumps(rho.correlation.to_dict(), sort_keys=True)}",
             f"hermite_order {rho.order}", f"seed {config.seed}", f"realizations {n_real}"]
    for r in reals:
        save_grid(r.grid, out / f"sim_{r.index}.asc", "sim")
        if images:
            save_grayscale(r.values, out / f"sim_{r.index}.pgm")
        d = {k: v for k, v in r.diagnostics.items() if k != "u_data"}
        lines.append(f"sim_{r.index} {json.dumps(d, sort_keys=True)}")
    lines.append(f"config {json.dumps(_effective(cfg, config), sort_keys=True)}")
    (out / "simulate_report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = load_config(args.config) if args.config else {}
    run = dict(cfg.get("run") or {})
    run.setdefault("mtry", EXPERIMENT_MTRY)
    cfg["run"] = run
    config = run_config(cfg, args)
    report = run_experiment(args.name, config, config.seed, simulate_too=not args.no_simulation)
    report.save(args.out, images=bool(cfg.get("images")))
    return EXIT_OK


def cmd_variogram(args) -> int:
    cfg = load_config(args.config)
    samples = load_samples(_path(cfg, cfg["samples"])) if "samples" in cfg else None
    if samples is None:
        raise ConfigurationError("config lacks 'samples'")
    vcfg = dict(cfg.get("variogram") or {})
    emp = empirical_variogram(samples, n_bins=int(vcfg.get("n_bins", 20)), max_lag=vcfg.get("max_lag"))
    kinds = tuple(vcfg.get("kinds", ("spherical", "exponential", "gaussian")))
    model = fit_variogram(emp, kinds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    emp.to_csv(out / "variogram.csv")
    (out / "variogram_model.json").write_text(_dump(model.to_dict()), encoding="utf-8")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ember", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=None, help="worker threads (results do not depend on it)")
    p.add_argument("--seed", type=int, default=None, help="override the master seed")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="YAML configuration file")
        sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("train", help="train a model from samples")
    common(sp)
    sp.set_defaults(func=cmd_train)
    sp = sub.add_parser("estimate", help="write envelope statistics on the secondary grid")
    common(sp)
    sp.add_argument("--model", help="model file (overrides config)")
    sp.set_defaults(func=cmd_estimate)
    sp = sub.add_parser("simulate", help="write conditional realizations sim_<k>.asc")
    common(sp)
    sp.add_argument("--model", help="model file (overrides config)")
    sp.add_argument("--n-real", type=int, default=None, help="number of realizations")
    sp.set_defaults(func=cmd_simulate)
    sp = sub.add_parser("experiment", help="run a synthetic benchmark")
    sp.add_argument("name", choices=EXPERIMENTS)
    common(sp, config_required=False)
    sp.add_argument("--no-simulation", action="store_true", help="estimation only")
    sp.set_defaults(func=cmd_experiment)
    sp = sub.add_parser("variogram", help="empirical variogram and fitted model of the samples")
    common(sp)
    sp.set_defaults(func=cmd_variogram)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("ember: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigurationError, ParseError, ValidationError, FileNotFoundError, OSError,
            KeyError) as exc:
        msg = str(exc).strip().splitlines()[0] if str(exc).strip() else exc.__class__.__name__
        print(f"ember: error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except (EmberError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"ember: error: {exc}".splitlines()[0], file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
