"""
Rectilinear value grids: lattice description, multilinear interpolation,
per-cell provenance, the ``.eqcb`` binary format and slice export.

Non-periodic axes place ``count`` points on ``[lo, hi]`` inclusive (a single
point when ``count == 1``, which requires ``lo == hi``). Periodic axes place
``count`` points on ``[lo, hi)`` with ``hi - lo`` the period.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (BadGrid, BadMagic, DimMismatch, NaNCell, OutOfDomain,
                     TruncatedPayload, VersionMismatch)

EXPLICIT, INFERRED, FAILED = 0, 1, 2
PROVENANCE_NAMES = {EXPLICIT: "explicit", INFERRED: "inferred", FAILED: "failed"}

MAGIC = b"EQCB"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQ")
DEGENERATE_TOL = 1e-7


@dataclass(frozen=True)
class Axis:
    name: str
    lo: float
    hi: float
    count: int
    periodic: bool = False

    def __post_init__(self):
        if self.count < 1:
            raise BadGrid(f"axis '{self.name}' needs at least one point")
        if self.periodic and not self.hi > self.lo:
            raise BadGrid(f"periodic axis '{self.name}' needs hi > lo")
        if not self.periodic:
            if self.count == 1 and self.hi != self.lo:
                raise BadGrid(f"single-point axis '{self.name}' needs lo == hi")
            if self.count > 1 and not self.hi > self.lo:
                raise BadGrid(f"axis '{self.name}' needs hi > lo")

    @property
    def spacing(self) -> float:
        if self.periodic:
            return (self.hi - self.lo) / self.count
        return 0.0 if self.count == 1 else (self.hi - self.lo) / (self.count - 1)

    @property
    def coords(self) -> np.ndarray:
        if self.periodic:
            return self.lo + self.spacing * np.arange(self.count)
        if self.count == 1:
            return np.array([self.lo])
        return np.linspace(self.lo, self.hi, self.count)

    def to_dict(self):
        return dict(name=self.name, lo=self.lo, hi=self.hi, count=self.count, periodic=self.periodic)


@dataclass(frozen=True)
class GridSpec:
    axes: tuple

    def __post_init__(self):
        if len(self.axes) == 0:
            raise BadGrid("grid specification has no axes")

    @classmethod
    def from_axes(cls, *axes):
        return cls(tuple(axes))

    @property
    def shape(self):
        return tuple(a.count for a in self.axes)

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def ndim(self):
        return len(self.axes)

    @property
    def names(self):
        return [a.name for a in self.axes]

    def points(self) -> np.ndarray:
        """All lattice points in row-major order, shape ``(size, ndim)``."""
        mesh = np.meshgrid(*[a.coords for a in self.axes], indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def to_list(self):
        return [a.to_dict() for a in self.axes]

    @classmethod
    def from_list(cls, items):
        return cls(tuple(Axis(**d) for d in items))


@dataclass
class ValueGrid:
    spec: GridSpec
    values: np.ndarray
    provenance: np.ndarray
    metadata: dict = field(default_factory=dict)
    # wall-clock timings; kept out of the file so outputs stay byte-identical
    timings: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(self.spec.shape)
        self.provenance = np.asarray(self.provenance, dtype=np.uint8).reshape(self.spec.shape)

    @classmethod
    def filled(cls, spec, values, provenance=EXPLICIT, metadata=None):
        prov = np.full(spec.shape, provenance, dtype=np.uint8)
        vals = np.asarray(values, dtype=float).reshape(spec.shape)
        prov[np.isnan(vals)] = FAILED
        return cls(spec, vals, prov, dict(metadata or {}))

    @property
    def axes(self):
        return self.spec.axes

    def counts(self):
        """Census of provenance tags."""
        return {name: int(np.count_nonzero(self.provenance == k)) for k, name in PROVENANCE_NAMES.items()}

    def interpolate(self, x, clamp_tol=0.0):
        return interpolate(self, x, clamp_tol=clamp_tol)


def _stencil(axis, q, clamp_tol):
    """Lower index, upper index and weight of the upper node along one axis."""
    if axis.periodic:
        s = (q - axis.lo) / axis.spacing
        s = np.mod(s, axis.count)
        i0 = np.floor(s).astype(np.int64)
        t = s - i0
        i0 = np.minimum(i0, axis.count - 1)
        return i0, np.mod(i0 + 1, axis.count), t
    if axis.count == 1:
        tol = max(DEGENERATE_TOL * (1.0 + abs(axis.lo)), clamp_tol)
        if np.any(np.abs(q - axis.lo) > tol):
            raise OutOfDomain(f"coordinate outside single-point axis '{axis.name}' = {axis.lo}")
        z = np.zeros(np.shape(q), dtype=np.int64)
        return z, z, np.zeros(np.shape(q))
    tol = 1e-12 * (1.0 + max(abs(axis.lo), abs(axis.hi))) + clamp_tol
    if np.any((q < axis.lo - tol) | (q > axis.hi + tol)):
        raise OutOfDomain(f"coordinate outside axis '{axis.name}' range [{axis.lo}, {axis.hi}]")
    q = np.clip(q, axis.lo, axis.hi)
    s = (q - axis.lo) / axis.spacing
    i0 = np.minimum(np.floor(s).astype(np.int64), axis.count - 2)
    t = s - i0
    return i0, i0 + 1, t


def interpolate(grid, x, clamp_tol=0.0):
    """Multilinear interpolation of a :class:`ValueGrid`.

    ``x`` may be a single point ``(ndim,)`` or a batch ``(..., ndim)``.
    Exact at lattice points. Periodic axes wrap around. Raises
    :class:`OutOfDomain` outside the bounds of a non-periodic axis (beyond
    ``clamp_tol``) and :class:`NaNCell` if a stencil corner with positive
    weight holds a failed cell.
    """
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 1
    q = np.atleast_2d(x).reshape(-1, x.shape[-1])
    if q.shape[1] != grid.spec.ndim:
        raise DimMismatch(f"query has {q.shape[1]} coordinates, grid has {grid.spec.ndim}")
    lows, highs, ts = [], [], []
    for k, axis in enumerate(grid.axes):
        i0, i1, t = _stencil(axis, q[:, k], clamp_tol)
        lows.append(i0)
        highs.append(i1)
        ts.append(t)
    vals = grid.values
    out = np.zeros(len(q))
    bad = np.zeros(len(q), dtype=bool)
    d = grid.spec.ndim
    for corner in range(1 << d):
        idx = []
        w = np.ones(len(q))
        for k in range(d):
            if corner >> k & 1:
                idx.append(highs[k])
                w = w * ts[k]
            else:
                idx.append(lows[k])
                w = w * (1.0 - ts[k])
        v = vals[tuple(idx)]
        used = w > 0
        nan = np.isnan(v) & used
        bad |= nan
        out += np.where(used, w * np.where(np.isnan(v), 0.0, v), 0.0)
    if np.any(bad):
        raise NaNCell(f"{int(bad.sum())} queries touch failed cells")
    out = out.reshape(x.shape[:-1]) if not scalar else out[0]
    return float(out) if scalar else out


def interpolate_or_nan(grid, x, clamp_tol=0.0):
    """Pointwise variant of :func:`interpolate` returning NaN instead of raising."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    try:
        return interpolate(grid, x, clamp_tol)
    except (OutOfDomain, NaNCell):
        out = np.empty(len(x))
        for k, row in enumerate(x):
            try:
                out[k] = interpolate(grid, row, clamp_tol)
            except (OutOfDomain, NaNCell):
                out[k] = np.nan
        return out


# ----------------------------------------------------------------------------
# metadata hashing


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def config_hash(params: dict) -> str:
    """Stable digest of synthesis parameters."""
    blob = json.dumps(_jsonable(params), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ----------------------------------------------------------------------------
# serialization


def dumps(grid) -> bytes:
    header = dict(axes=grid.spec.to_list(), metadata=_jsonable(grid.metadata))
    meta = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    vals = np.ascontiguousarray(grid.values, dtype="<f8").tobytes()
    prov = np.ascontiguousarray(grid.provenance, dtype=np.uint8).tobytes()
    return _HEADER.pack(MAGIC, FORMAT_VERSION, len(meta)) + meta + vals + prov


def loads(blob: bytes) -> ValueGrid:
    if len(blob) < _HEADER.size:
        raise TruncatedPayload("file shorter than the fixed header")
    magic, version, n_meta = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"format version {version}, expected {FORMAT_VERSION}")
    off = _HEADER.size
    if len(blob) < off + n_meta:
        raise TruncatedPayload("metadata block truncated")
    header = json.loads(blob[off:off + n_meta].decode("utf-8"))
    off += n_meta
    spec = GridSpec.from_list(header["axes"])
    n = spec.size
    if len(blob) < off + 9 * n:
        raise TruncatedPayload(f"payload holds {len(blob) - off} bytes, header claims {9 * n}")
    values = np.frombuffer(blob, dtype="<f8", count=n, offset=off).astype(np.float64)
    prov = np.frombuffer(blob, dtype=np.uint8, count=n, offset=off + 8 * n).copy()
    return ValueGrid(spec, values, prov, header.get("metadata", {}))


def save(grid, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(dumps(grid))


def load(path) -> ValueGrid:
    with open(path, "rb") as fh:
        return loads(fh.read())


# ----------------------------------------------------------------------------
# comparison and export


@dataclass(frozen=True)
class GridComparison:
    mean_abs_dev: float
    max_abs_dev: float
    n_compared: int
    n_skipped: int

    def to_dict(self):
        return dict(mean_abs_dev=self.mean_abs_dev, max_abs_dev=self.max_abs_dev,
                    n_compared=self.n_compared, n_skipped=self.n_skipped)


def compare_values(a, b) -> GridComparison:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    ok = ~(np.isnan(a) | np.isnan(b))
    if not np.any(ok):
        return GridComparison(0.0, 0.0, 0, int(a.size))
    dev = np.abs(a[ok] - b[ok])
    return GridComparison(float(dev.mean()), float(dev.max()), int(ok.sum()), int((~ok).sum()))


def compare(grid_a, grid_b) -> GridComparison:
    """Deviation statistics over cells where both grids hold values."""
    if grid_a.spec.to_list() != grid_b.spec.to_list():
        raise DimMismatch("grids have different axes")
    return compare_values(grid_a.values, grid_b.values)


def slice_grid(grid, fixed: dict):
    """Fix some axes at the nearest lattice coordinate.

    Returns the sliced grid; off-lattice requests snap to the nearest slice
    with a warning.
    """
    names = grid.spec.names
    index = []
    axes = []
    for k, axis in enumerate(grid.axes):
        if axis.name not in fixed:
            index.append(slice(None))
            axes.append(axis)
            continue
        c = axis.coords
        q = float(fixed[axis.name])
        if axis.periodic:
            q = axis.lo + np.mod(q - axis.lo, axis.hi - axis.lo)
            dist = np.abs(np.angle(np.exp(1j * (c - q) * 2 * np.pi / (axis.hi - axis.lo))))
        else:
            dist = np.abs(c - q)
        i = int(np.argmin(dist))
        if not np.isclose(c[i], q, atol=1e-9):
            warnings.warn(f"{axis.name}={q:g} is off-lattice; using nearest slice {c[i]:g}")
        index.append(i)
    unknown = set(fixed) - set(names)
    if unknown:
        raise KeyError(f"unknown axis name(s): {sorted(unknown)}")
    spec = GridSpec(tuple(axes))
    return ValueGrid(spec, grid.values[tuple(index)], grid.provenance[tuple(index)], dict(grid.metadata))


def export_csv(grid, path, fixed=None):
    """Write a (sliced) grid as CSV: axis names, value, provenance per row."""
    g = slice_grid(grid, fixed or {})
    pts = g.spec.points()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(g.spec.names + ["value", "provenance"])
        for p, v, s in zip(pts, g.values.ravel(), g.provenance.ravel()):
            w.writerow([repr(float(c)) for c in p] + [repr(float(v)), PROVENANCE_NAMES[int(s)]])
    return g
