"""Forest training on data augmented with cross-validated kriging columns.

Each tree sees, for its in-bag samples, the secondary variables, the
coordinates and one leave-one-out simple-kriging estimate per embedded model
(computed on that tree's in-bag subset only).  At prediction time the
embedded columns come from kriging with all data.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

import numpy as np

from .core import RasterGrid, RunConfig, SampleSet, bbox_diagonal, derive_rng, read_archive, write_archive
from .errors import ConfigurationError, MissingValueError, SingularSystemError, ValidationError
from .forest import (
    Forest,
    StepCDF,
    Tree,
    WeightRows,
    draw_in_bag,
    forest_weights,
    map_trees,
    train_tree,
    weighted_cdf,
)
from .kriging import KrigingSystem, dual_krige_field, loo_cross_validate
from .variogram import VariogramModel

MODEL_FORMAT_VERSION = 1
MAX_TREE_RETRIES = 3
GRID_CHUNK = 8192
COORD_NAMES = ("x", "y", "z")


@dataclass(frozen=True)
class EmbeddedModelSpec:
    model: VariogramModel
    label: str

    def __post_init__(self):
        if not isinstance(self.model, VariogramModel):
            raise ValidationError("embedded spec needs a VariogramModel")
        if not self.label:
            raise ValidationError("embedded spec needs a label")

    def to_dict(self) -> dict:
        return {"label": self.label, **self.model.to_dict()}

    @classmethod
    def from_dict(cls, d) -> "EmbeddedModelSpec":
        d = dict(d)
        label = d.pop("label")
        return cls(VariogramModel.from_dict(d), label)


def default_specs(samples: SampleSet) -> list[EmbeddedModelSpec]:
    """Unfitted long- and short-range exponential models.

    Sill is the sample variance of ``z``; ranges are half and a tenth of the
    bounding-box diagonal.
    """
    sill = float(np.var(samples.z, ddof=1)) if samples.n > 1 else 1.0
    if not sill > 0:
        sill = 1.0
    diag = bbox_diagonal(samples.coords)
    if not diag > 0:
        diag = 1.0
    return [
        EmbeddedModelSpec(VariogramModel("exponential", sill, diag / 2, 0.0), "long_range"),
        EmbeddedModelSpec(VariogramModel("exponential", sill, diag / 10, 0.0), "short_range"),
    ]


class Envelope(StepCDF):
    """Local conditional distribution: atoms are training targets, weights from the forest."""

    def exceedance(self, t) -> float:
        return self.prob_gt(t)


@dataclass(frozen=True)
class EmberModel:
    forest: Forest
    samples: SampleSet
    specs: tuple
    systems: tuple
    config: RunConfig
    tree_embedded: tuple = ()

    def __post_init__(self):
        expected = self.samples.p + self.samples.dim + len(self.specs)
        if self.forest.n_features != expected:
            raise ValidationError(
                f"forest has {self.forest.n_features} features, expected {expected}"
            )

    @property
    def feature_names(self) -> tuple:
        return self.forest.feature_names

    def importance(self) -> dict:
        return dict(zip(self.feature_names, self.forest.importance().tolist()))


def feature_names(samples: SampleSet, specs) -> tuple:
    return tuple(samples.names) + COORD_NAMES[: samples.dim] + tuple(s.label for s in specs)


def _check_specs(specs):
    labels = [s.label for s in specs]
    if len(set(labels)) != len(labels):
        raise ValidationError(f"embedded labels must be unique: {labels}")


def _train_tree(samples, base, specs, config, t):
    rng = derive_rng(config.seed, "tree", t)
    n = samples.n
    mtry = config.resolved_mtry(base.shape[1] + len(specs))
    last_error = None
    for _ in range(MAX_TREE_RETRIES + 1):
        in_bag = draw_in_bag(rng, n, config.subsample_fraction)
        try:
            cols = [
                loo_cross_validate(
                    KrigingSystem(samples.coords[in_bag], samples.z[in_bag], spec.model)
                ).zk_minus
                for spec in specs
            ]
        except SingularSystemError as exc:
            last_error = exc
            continue
        emb = np.column_stack(cols) if cols else np.zeros((in_bag.size, 0))
        X = np.hstack([base[in_bag], emb])
        tree = train_tree(X, samples.z[in_bag], rng, config.min_leaf, mtry,
                          sample_ids=in_bag, stream=t)
        return tree, emb
    raise SingularSystemError(
        f"tree {t}: kriging failed on {MAX_TREE_RETRIES + 1} in-bag draws ({last_error})"
    )


def train_ember(samples: SampleSet, specs=None, config: RunConfig = RunConfig()) -> EmberModel:
    """Train the forest on ``[Y | coords | LOO kriging per spec]``.

    ``specs=None`` uses :func:`default_specs`; an empty list trains a plain
    quantile forest on ``[Y | coords]``.
    """
    if samples.n < max(2, config.min_leaf):
        raise ValidationError(f"need at least max(2, min_leaf) = {max(2, config.min_leaf)} samples")
    specs = tuple(default_specs(samples) if specs is None else specs)
    _check_specs(specs)
    base = np.hstack([samples.y, samples.coords])
    results = map_trees(lambda t: _train_tree(samples, base, specs, config, t),
                        config.n_trees, config.n_jobs)
    forest = Forest(tuple(r[0] for r in results), samples.n, feature_names(samples, specs))
    systems = tuple(KrigingSystem(samples.coords, samples.z, s.model) for s in specs)
    return EmberModel(forest, samples, specs, systems, config, tuple(r[1] for r in results))


def embedded_features(model: EmberModel, coords, y) -> np.ndarray:
    """Feature rows ``[y | coords | Z^K per spec]`` for many locations."""
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    y = np.asarray(y, dtype=float).reshape(coords.shape[0], -1)
    if y.shape[1] != model.samples.p:
        raise ValidationError(f"expected {model.samples.p} secondary values, got {y.shape[1]}")
    if coords.shape[1] != model.samples.dim:
        raise ValidationError(f"expected {model.samples.dim}-D locations")
    if np.any(np.isnan(y)):
        raise MissingValueError("missing secondary value")
    emb = [dual_krige_field(s, coords) for s in model.systems]
    return np.column_stack([y, coords] + emb)


def embedded_features_at(model: EmberModel, loc, y) -> np.ndarray:
    return embedded_features(model, np.asarray(loc, dtype=float).reshape(1, -1),
                             np.asarray(y, dtype=float).reshape(1, -1))[0]


def envelope_at(model: EmberModel, loc, y) -> Envelope:
    x = embedded_features_at(model, loc, y)
    cdf = weighted_cdf(forest_weights(model.forest, x), model.samples.z)
    return Envelope(cdf.values, cdf.weights, cdf.sample_index)


def envelope_rows(model: EmberModel, features) -> WeightRows:
    """Batch envelopes for precomputed feature rows."""
    return WeightRows(model.forest.weight_matrix(features), model.samples.z)


def grid_features(model: EmberModel, grid: RasterGrid) -> tuple[np.ndarray, np.ndarray]:
    """Feature rows for every valid cell and the flat indices of those cells."""
    if model.samples.dim != 2:
        raise ConfigurationError("grid estimation needs a 2-D model")
    missing = [nm for nm in model.samples.names if nm not in grid.layers]
    if missing:
        raise ConfigurationError(f"grid lacks secondary layers {missing}")
    if model.samples.p:
        y = np.column_stack([grid.layers[nm].ravel() for nm in model.samples.names])
        valid = np.flatnonzero(~np.isnan(y).any(axis=1))
        y = y[valid]
    else:
        valid = np.arange(grid.nrows * grid.ncols)
        y = np.zeros((valid.size, 0))
    coords = grid.cell_centers()[valid]
    return embedded_features(model, coords, y), valid


_Q = re.compile(r"^q(\d+(?:\.\d*)?)$")
_CALL = re.compile(r"^(prob_gt|prob_in)[(:](.*?)\)?$")


def parse_output(spec: str):
    """Parse an output name into ``(kind, args)``.

    Accepted: ``mean``, ``std``, ``qNN`` (percent), ``prob_gt:t`` or
    ``prob_gt(t)``, ``prob_in:a:b`` or ``prob_in(a,b)``.
    """
    s = spec.strip()
    if s in ("mean", "std"):
        return s, ()
    m = _Q.match(s)
    if m:
        q = float(m.group(1)) / 100.0
        if not 0 <= q <= 1:
            raise ConfigurationError(f"quantile out of range in {spec!r}")
        return "quantile", (q,)
    m = _CALL.match(s)
    if m:
        try:
            args = tuple(float(a) for a in re.split(r"[,:]", m.group(2)))
        except ValueError:
            raise ConfigurationError(f"bad numeric argument in {spec!r}") from None
        need = 1 if m.group(1) == "prob_gt" else 2
        if len(args) != need:
            raise ConfigurationError(f"{m.group(1)} takes {need} argument(s): {spec!r}")
        if need == 2 and args[0] > args[1]:
            raise ConfigurationError(f"empty interval in {spec!r}")
        return m.group(1), args
    raise ConfigurationError(f"unknown output statistic {spec!r}")


def _evaluate(rows: WeightRows, kind, args):
    if kind == "mean":
        return rows.mean()
    if kind == "std":
        return rows.std()
    if kind == "quantile":
        return rows.quantile(args[0])
    if kind == "prob_gt":
        return rows.prob_gt(args[0])
    return rows.interval_prob(*args)


def estimate_grid(model: EmberModel, grid: RasterGrid, outputs) -> RasterGrid:
    """Envelope statistics on every cell; cells with missing secondaries stay NaN."""
    parsed = [(name, parse_output(name)) for name in outputs]
    features, valid = grid_features(model, grid)
    ncell = grid.nrows * grid.ncols
    result = {name: np.full(ncell, np.nan) for name, _ in parsed}
    for s in range(0, valid.size, GRID_CHUNK):
        rows = envelope_rows(model, features[s:s + GRID_CHUNK])
        cells = valid[s:s + GRID_CHUNK]
        for name, (kind, args) in parsed:
            result[name][cells] = _evaluate(rows, kind, args)
    return grid.geometry().with_layers(result)


_TREE_FIELDS = ("feature", "threshold", "left", "right", "leaf_id", "offsets",
                "samples", "lower", "upper", "importance", "in_bag")


def save_model(model: EmberModel, path) -> None:
    """Serialize to a deterministic archive (same model, same bytes)."""
    arrays = {
        "coords": model.samples.coords,
        "z": model.samples.z,
        "y": model.samples.y,
    }
    for f in _TREE_FIELDS:
        arrays["tree_" + f] = np.concatenate([getattr(t, f) for t in model.forest.trees])
    for f in ("feature", "offsets", "lower", "in_bag"):
        arrays["count_" + f] = np.array([getattr(t, f).shape[0] for t in model.forest.trees])
    arrays["stream"] = np.array([t.stream for t in model.forest.trees])
    if model.tree_embedded:
        arrays["embedded"] = np.concatenate(model.tree_embedded)
    meta = {
        "format_version": MODEL_FORMAT_VERSION,
        "names": list(model.samples.names),
        "feature_names": list(model.forest.feature_names),
        "specs": [s.to_dict() for s in model.specs],
        # thread count is an execution detail and does not change the model
        "config": {k: v for k, v in model.config.to_dict().items() if k != "n_jobs"},
        "means": [s.mean for s in model.systems],
    }
    write_archive(path, arrays, meta)


def load_model(path) -> EmberModel:
    arrays, meta = read_archive(path)
    if meta.get("format_version") != MODEL_FORMAT_VERSION:
        raise ConfigurationError(f"unsupported model format {meta.get('format_version')!r}")
    samples = SampleSet(arrays["coords"], arrays["z"], arrays["y"], tuple(meta["names"]))
    specs = tuple(EmbeddedModelSpec.from_dict(d) for d in meta["specs"])
    config = RunConfig.from_dict({**meta["config"], "thresholds": tuple(meta["config"]["thresholds"])})
    p = len(meta["feature_names"])
    bounds = {}
    for f, cnt in (("feature", "feature"), ("threshold", "feature"), ("left", "feature"),
                   ("right", "feature"), ("leaf_id", "feature"), ("offsets", "offsets"),
                   ("lower", "lower"), ("upper", "lower"), ("in_bag", "in_bag")):
        bounds[f] = np.concatenate([[0], np.cumsum(arrays["count_" + cnt])])
    n_samples = [int(arrays["tree_offsets"][bounds["offsets"][k + 1] - 1])
                 for k in range(len(arrays["stream"]))]
    bounds["samples"] = np.concatenate([[0], np.cumsum(n_samples)])
    trees = []
    for k, stream in enumerate(arrays["stream"]):
        fields = {}
        for f in _TREE_FIELDS:
            if f == "importance":
                fields[f] = arrays["tree_importance"][k * p:(k + 1) * p]
                continue
            lo, hi = bounds[f][k], bounds[f][k + 1]
            fields[f] = arrays["tree_" + f][lo:hi]
        trees.append(Tree(**fields, stream=int(stream)))
    forest = Forest(tuple(trees), samples.n, tuple(meta["feature_names"]))
    systems = tuple(KrigingSystem(samples.coords, samples.z, s.model, m)
                    for s, m in zip(specs, meta["means"]))
    embedded = ()
    if "embedded" in arrays:
        counts = arrays["count_in_bag"]
        starts = np.concatenate([[0], np.cumsum(counts)])
        embedded = tuple(arrays["embedded"][starts[k]:starts[k + 1]] for k in range(len(trees)))
    return EmberModel(forest, samples, specs, systems, config, embedded)


def model_summary(model: EmberModel) -> str:
    return json.dumps({
        "n_samples": model.samples.n,
        "features": list(model.feature_names),
        "importance": model.importance(),
        "n_trees": len(model.forest.trees),
    }, indent=1)

