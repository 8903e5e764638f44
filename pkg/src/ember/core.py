"""Domain types, file ingestion and raster-grid plumbing.

Locations are plain ``numpy`` coordinate vectors (shape ``(d,)``, or ``(m, d)``
for batches) in world units, the same units as variogram ranges.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    ConfigurationError,
    MissingValueError,
    OutOfDomainError,
    ParseError,
    ValidationError,
)

DUPLICATE_TOLERANCE = 1e-9
COORD_COLUMNS = ("x", "y")
THIRD_COORD_NAMES = ("z", "z_coord")
VALUE_COLUMN = "value"


def derive_rng(seed: int, domain: str, *indices: int) -> np.random.Generator:
    """Independent, reproducible generator for a labelled stream.

    The stream depends only on ``(seed, domain, indices)`` so work split across
    trees or realizations is reproducible regardless of scheduling.
    """
    key = (zlib.crc32(domain.encode("utf-8")),) + tuple(int(i) for i in indices)
    ss = np.random.SeedSequence(int(seed), spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))


def _check_seed(seed):
    if not isinstance(seed, (int, np.integer)) or isinstance(seed, bool):
        raise ConfigurationError(f"seed must be an integer, got {seed!r}")
    if not 0 <= int(seed) < 2**64:
        raise ConfigurationError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class SampleSet:
    """Hard data: coordinates, target values and secondary variables.

    Attributes
    ----------
    coords : ndarray, shape (n, d)
    z : ndarray, shape (n,)
    y : ndarray, shape (n, p)
    names : tuple of str
        Names of the ``p`` secondary variables.
    """

    coords: np.ndarray
    z: np.ndarray
    y: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        coords = np.array(self.coords, dtype=float, ndmin=2)
        z = np.array(self.z, dtype=float).reshape(-1)
        n = z.shape[0]
        y = np.array(self.y, dtype=float)
        if y.size == 0:
            y = np.zeros((n, 0))
        y = y.reshape(n, -1) if y.ndim != 2 else y
        names = tuple(self.names)
        if n < 1:
            raise ValidationError("a sample set needs at least one sample")
        if coords.shape[0] != n or y.shape[0] != n:
            raise ValidationError("coords, z and y must have the same number of rows")
        if coords.shape[1] not in (2, 3):
            raise ValidationError("coordinates must be 2-D or 3-D")
        if len(names) != y.shape[1]:
            raise ValidationError(
                f"{y.shape[1]} secondary columns but {len(names)} names"
            )
        for label, arr in (("coordinate", coords), ("target", z), ("secondary", y)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"non-finite {label} value")
        dup = find_duplicate_locations(coords)
        if dup is not None:
            raise ValidationError(f"samples {dup[0]} and {dup[1]} share a location")
        for arr in (coords, z, y):
            arr.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "names", names)

    @property
    def n(self) -> int:
        return self.z.shape[0]

    @property
    def p(self) -> int:
        return self.y.shape[1]

    @property
    def dim(self) -> int:
        return self.coords.shape[1]

    def subset(self, index) -> "SampleSet":
        index = np.asarray(index)
        return SampleSet(self.coords[index], self.z[index], self.y[index], self.names)


def bbox_diagonal(coords) -> float:
    coords = np.atleast_2d(coords)
    return float(np.linalg.norm(coords.max(axis=0) - coords.min(axis=0)))


def find_duplicate_locations(coords, rel_tol=DUPLICATE_TOLERANCE):
    """Return the first pair of indices closer than ``rel_tol`` x bbox diagonal, or None."""
    coords = np.atleast_2d(coords)
    if coords.shape[0] < 2:
        return None
    tol = rel_tol * bbox_diagonal(coords)
    pairs = cKDTree(coords).query_pairs(r=tol, output_type="ndarray")
    if len(pairs) == 0:
        return None
    pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
    return int(pairs[0, 0]), int(pairs[0, 1])


def load_samples(path) -> SampleSet:
    """Read a sample CSV with header ``x,y[,z],value,<secondary...>``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"sample file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file", path) from None
        lowered = [h.lower() for h in header]
        if lowered[:2] != list(COORD_COLUMNS):
            raise ParseError("header must start with 'x,y'", path, 1)
        d = 3 if len(lowered) > 2 and lowered[2] in THIRD_COORD_NAMES else 2
        if len(lowered) <= d or lowered[d] != VALUE_COLUMN:
            raise ParseError(f"expected '{VALUE_COLUMN}' column after coordinates", path, 1)
        names = tuple(header[d + 1:])
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"expected {len(header)} fields, found {len(row)}", path, lineno
                )
            try:
                values = [float(c) for c in row]
            except ValueError as exc:
                raise ParseError(str(exc), path, lineno) from None
            if not all(math.isfinite(v) for v in values):
                raise ParseError("non-finite value", path, lineno)
            rows.append(values)
    if not rows:
        raise ParseError("no data rows", path)
    data = np.array(rows, dtype=float)
    return SampleSet(data[:, :d], data[:, d], data[:, d + 1:], names)


def save_samples(samples: SampleSet, path) -> None:
    """Write samples as CSV with 17 significant digits (lossless for doubles)."""
    coord_names = ["x", "y", "z"][: samples.dim]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(coord_names + [VALUE_COLUMN] + list(samples.names))
        for i in range(samples.n):
            vals = list(samples.coords[i]) + [samples.z[i]] + list(samples.y[i])
            writer.writerow([f"{v:.17g}" for v in vals])


@dataclass(frozen=True)
class RasterGrid:
    """Regular 2-D raster with named layers.

    ``layers`` hold ``(nrows, ncols)`` arrays in row-major order with row 0 at
    the top (north), as in ESRI ASCII grids.  Nodata cells are stored as NaN.
    """

    origin: tuple
    cell_size: float
    ncols: int
    nrows: int
    layers: Mapping[str, np.ndarray] = field(default_factory=dict)
    nodata_value: float = -9999.0

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ValidationError("cell_size must be positive")
        if self.ncols < 1 or self.nrows < 1:
            raise ValidationError("grid needs at least one row and one column")
        layers = {}
        for name, arr in self.layers.items():
            arr = np.array(arr, dtype=float)
            if arr.size != self.ncols * self.nrows:
                raise ValidationError(
                    f"layer {name!r} has {arr.size} values, expected {self.ncols * self.nrows}"
                )
            arr = arr.reshape(self.nrows, self.ncols)
            arr.setflags(write=False)
            layers[name] = arr
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "layers", layers)

    @property
    def shape(self):
        return (self.nrows, self.ncols)

    @property
    def extent(self):
        x0, y0 = self.origin
        return (x0, x0 + self.ncols * self.cell_size, y0, y0 + self.nrows * self.cell_size)

    def geometry(self) -> "RasterGrid":
        return RasterGrid(self.origin, self.cell_size, self.ncols, self.nrows, {}, self.nodata_value)

    def same_geometry(self, other: "RasterGrid") -> bool:
        return (
            self.origin == other.origin
            and self.cell_size == other.cell_size
            and self.shape == other.shape
        )

    def with_layers(self, layers: Mapping[str, np.ndarray]) -> "RasterGrid":
        merged = dict(self.layers)
        merged.update(layers)
        return dataclasses.replace(self, layers=merged)

    def cell_centers(self) -> np.ndarray:
        """Centers of all cells, shape ``(nrows * ncols, 2)``, row-major from the top."""
        x0, y0 = self.origin
        cs = self.cell_size
        xs = x0 + (np.arange(self.ncols) + 0.5) * cs
        ys = y0 + (self.nrows - np.arange(self.nrows) - 0.5) * cs
        gx, gy = np.meshgrid(xs, ys)
        return np.column_stack([gx.ravel(), gy.ravel()])

    def cell_index(self, coords) -> tuple[np.ndarray, np.ndarray]:
        """Row and column of the cell containing each location.

        Points on the outer boundary belong to the adjacent edge cell.
        """
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        x0, x1, y0, y1 = self.extent
        x, y = coords[:, 0], coords[:, 1]
        outside = (x < x0) | (x > x1) | (y < y0) | (y > y1) | ~np.isfinite(x) | ~np.isfinite(y)
        if np.any(outside):
            i = int(np.flatnonzero(outside)[0])
            raise OutOfDomainError(f"location {coords[i].tolist()} outside grid extent")
        col = np.floor((x - x0) / self.cell_size).astype(np.int64)
        row_from_bottom = np.floor((y - y0) / self.cell_size).astype(np.int64)
        col = np.clip(col, 0, self.ncols - 1)
        row = self.nrows - 1 - np.clip(row_from_bottom, 0, self.nrows - 1)
        return row, col

    def flat_index(self, coords) -> np.ndarray:
        row, col = self.cell_index(coords)
        return row * self.ncols + col


def sample_grid_at(grid: RasterGrid, loc, layer: str | None = None) -> float:
    """Value of the cell containing ``loc``."""
    if layer is None:
        if len(grid.layers) != 1:
            raise ConfigurationError("grid has several layers; name one")
        layer = next(iter(grid.layers))
    row, col = grid.cell_index(np.asarray(loc, dtype=float)[:2])
    value = float(grid.layers[layer][row[0], col[0]])
    if math.isnan(value):
        raise MissingValueError(f"nodata at {list(loc)} in layer {layer!r}")
    return value


def attach_secondary(coords, z, grids: Sequence[RasterGrid] | RasterGrid, names=None) -> SampleSet:
    """Build a SampleSet by looking secondary values up in grid layers."""
    if isinstance(grids, RasterGrid):
        grids = [grids]
    columns, found = [], []
    for g in grids:
        for name in g.layers:
            if names is not None and name not in names:
                continue
            columns.append([sample_grid_at(g, c, name) for c in np.atleast_2d(coords)])
            found.append(name)
    if names is not None:
        missing = set(names) - set(found)
        if missing:
            raise ConfigurationError(f"secondary layers not found: {sorted(missing)}")
        order = [found.index(nm) for nm in names]
        columns = [columns[i] for i in order]
        found = list(names)
    y = np.array(columns).T if columns else np.zeros((len(z), 0))
    return SampleSet(coords, z, y, tuple(found))


_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "xllcenter", "yllcenter",
                "cellsize", "nodata_value")


def load_grid(path) -> RasterGrid:
    """Read an ESRI ASCII raster; the single layer is named after the file stem."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"grid file not found: {path}")
    text = path.read_text(encoding="utf-8").splitlines()
    header = {}
    lineno = 0
    for lineno, line in enumerate(text, start=1):
        parts = line.split()
        if not parts:
            continue
        key = parts[0].lower()
        if key not in _HEADER_KEYS:
            lineno -= 1
            break
        if len(parts) != 2:
            raise ParseError(f"bad header line {line!r}", path, lineno)
        try:
            header[key] = float(parts[1])
        except ValueError:
            raise ParseError(f"bad header value {parts[1]!r}", path, lineno) from None
    for key in ("ncols", "nrows", "cellsize"):
        if key not in header:
            raise ParseError(f"missing header key {key!r}", path)
    ncols, nrows, cs = int(header["ncols"]), int(header["nrows"]), header["cellsize"]
    if "xllcorner" in header:
        x0 = header["xllcorner"]
    elif "xllcenter" in header:
        x0 = header["xllcenter"] - cs / 2
    else:
        raise ParseError("missing xllcorner", path)
    if "yllcorner" in header:
        y0 = header["yllcorner"]
    elif "yllcenter" in header:
        y0 = header["yllcenter"] - cs / 2
    else:
        raise ParseError("missing yllcorner", path)
    nodata = header.get("nodata_value", -9999.0)
    tokens = " ".join(text[lineno:]).split()
    if len(tokens) != ncols * nrows:
        raise ParseError(
            f"header declares {ncols}x{nrows}={ncols * nrows} values, body has {len(tokens)}",
            path,
        )
    try:
        values = np.array([float(t) for t in tokens], dtype=float)
    except ValueError as exc:
        raise ParseError(str(exc), path) from None
    values[values == nodata] = np.nan
    return RasterGrid((x0, y0), cs, ncols, nrows, {path.stem: values}, nodata)


def save_grid(grid: RasterGrid, path, layer: str | None = None) -> None:
    """Write one layer as an ESRI ASCII raster at full (17 digit) precision."""
    if layer is None:
        if len(grid.layers) != 1:
            raise ConfigurationError("grid has several layers; name one")
        layer = next(iter(grid.layers))
    arr = grid.layers[layer]
    lines = [
        f"ncols {grid.ncols}",
        f"nrows {grid.nrows}",
        f"xllcorner {grid.origin[0]:.17g}",
        f"yllcorner {grid.origin[1]:.17g}",
        f"cellsize {grid.cell_size:.17g}",
        f"NODATA_value {grid.nodata_value:.17g}",
    ]
    nod = f"{grid.nodata_value:.17g}"
    for row in arr:
        lines.append(" ".join(nod if math.isnan(v) else f"{v:.17g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def save_grayscale(arr, path) -> None:
    """Min-max stretched 8-bit binary PGM, nodata rendered black."""
    arr = np.asarray(arr, dtype=float)
    finite = np.isfinite(arr)
    out = np.zeros(arr.shape, dtype=np.uint8)
    if finite.any():
        lo, hi = arr[finite].min(), arr[finite].max()
        scale = 255.0 / (hi - lo) if hi > lo else 0.0
        out[finite] = np.round((arr[finite] - lo) * scale).astype(np.uint8)
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + out.tobytes())


@dataclass(frozen=True)
class RunConfig:
    """Forest, simulation and reproducibility parameters.

    ``mtry=None`` means ``max(1, ceil(p_total / 3))``.
    """

    n_trees: int = 100
    mtry: int | None = None
    min_leaf: int = 5
    subsample_fraction: float = 0.632
    n_realizations: int = 10
    gibbs_burn_in: int = 100
    hermite_order: int = 1
    seed: int = 0
    thresholds: tuple = ()
    n_jobs: int = 1

    def __post_init__(self):
        for name in ("n_trees", "min_leaf", "n_realizations", "gibbs_burn_in", "hermite_order", "n_jobs"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if self.mtry is not None and (not isinstance(self.mtry, (int, np.integer)) or self.mtry < 1):
            raise ConfigurationError("mtry must be a positive integer or None")
        if not 0 < self.subsample_fraction <= 1:
            raise ConfigurationError("subsample_fraction must lie in (0, 1]")
        _check_seed(self.seed)
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))

    def resolved_mtry(self, p_total: int) -> int:
        if self.mtry is None:
            return max(1, math.ceil(p_total / 3))
        return min(self.mtry, p_total)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["thresholds"] = list(self.thresholds)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown run-config keys: {sorted(unknown)}")
        return cls(**dict(d))


def write_archive(path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    """Write arrays (and a JSON metadata block) to a zip of ``.npy`` members.

    Member timestamps are fixed so identical content gives identical bytes.
    """
    import io
    import json
    import zipfile

    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        def put(name, payload):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, payload)

        put("meta.json", json.dumps(dict(meta or {}), sort_keys=True, indent=1))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            put(name + ".npy", buf.getvalue())


def read_archive(path) -> tuple[dict, dict]:
    import io
    import json
    import zipfile

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"archive not found: {path}")
    arrays = {}
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            for name in zf.namelist():
                if name.endswith(".npy"):
                    arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)),
                                                                 allow_pickle=False)
    except (zipfile.BadZipFile, KeyError, ValueError) as exc:
        raise ParseError(f"unreadable archive ({exc})", path) from None
    return arrays, meta
