"""Grid geometry, trajectory-to-flow aggregation, min-max scaling and
external-factor encoding.

Cells are half-open: a point lying exactly on a grid line belongs to the cell
with the larger index, and the upper bounds themselves are outside the grid.
Row index grows with latitude, column index with longitude.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError, DegenerateScaleError, TrajectoryError

INFLOW, OUTFLOW = 0, 1
CHANNELS = ("inflow", "outflow")


@dataclass(frozen=True)
class GridSpec:
    height: int
    width: int
    bounds: tuple[float, float, float, float] = (0.0, 1.0, 0.0, 1.0)  # min_lat, max_lat, min_lon, max_lon
    interval: int = 30  # minutes per step

    def __post_init__(self):
        if int(self.height) < 1 or int(self.width) < 1:
            raise ConfigError(f"grid must be at least 1x1, got {self.height}x{self.width}")
        lat0, lat1, lon0, lon1 = self.bounds
        if not (lat1 > lat0 and lon1 > lon0):
            raise ConfigError(f"degenerate grid bounds {self.bounds}")
        if int(self.interval) < 1:
            raise ConfigError(f"interval must be a positive number of minutes, got {self.interval}")
        object.__setattr__(self, "bounds", tuple(float(b) for b in self.bounds))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def steps_per_day(self) -> int:
        return (24 * 60) // self.interval

    def contains_index(self, i: int, j: int) -> bool:
        return 0 <= i < self.height and 0 <= j < self.width

    def locate(self, lat, lon):
        """Map coordinates to flat cell ids; -1 marks points outside the grid."""
        lat = np.asarray(lat, dtype=np.float64)
        lon = np.asarray(lon, dtype=np.float64)
        lat0, lat1, lon0, lon1 = self.bounds
        i = np.floor((lat - lat0) * self.height / (lat1 - lat0)).astype(np.int64)
        j = np.floor((lon - lon0) * self.width / (lon1 - lon0)).astype(np.int64)
        inside = (i >= 0) & (i < self.height) & (j >= 0) & (j < self.width)
        return np.where(inside, i * self.width + j, -1)

    def to_dict(self) -> dict:
        return {"height": self.height, "width": self.width,
                "bounds": list(self.bounds), "interval": self.interval}

    @classmethod
    def from_dict(cls, d: Mapping) -> "GridSpec":
        return cls(int(d["height"]), int(d["width"]), tuple(d["bounds"]), int(d["interval"]))


@dataclass(frozen=True)
class FlowSnapshot:
    inflow: np.ndarray
    outflow: np.ndarray
    t: int

    def stacked(self) -> np.ndarray:
        return np.stack([self.inflow, self.outflow])


@dataclass
class FlowSeries:
    """Consecutive flow grids, ``flows[k]`` holding interval ``t0 + k``.

    ``flows`` has shape (T, 2, h, w); channel 0 is inflow, channel 1 outflow.
    """

    flows: np.ndarray
    grid: GridSpec
    t0: int = 0
    start: str | None = None  # ISO timestamp of interval t0, informational

    def __post_init__(self):
        self.flows = np.asarray(self.flows)
        if self.flows.ndim != 4 or self.flows.shape[1:] != (2, *self.grid.shape):
            raise DataError(
                f"flow array shape {self.flows.shape} does not match (T, 2, {self.grid.height}, {self.grid.width})")

    def __len__(self) -> int:
        return self.flows.shape[0]

    def snapshot(self, t: int) -> FlowSnapshot:
        k = t - self.t0
        if not 0 <= k < len(self):
            raise IndexError(f"interval {t} outside series [{self.t0}, {self.t0 + len(self)})")
        return FlowSnapshot(self.flows[k, INFLOW], self.flows[k, OUTFLOW], t)

    @classmethod
    def from_snapshots(cls, snapshots: Sequence[FlowSnapshot], grid: GridSpec) -> "FlowSeries":
        if not snapshots:
            raise DataError("empty snapshot sequence")
        ts = [s.t for s in snapshots]
        if any(b - a != 1 for a, b in zip(ts, ts[1:])):
            raise DataError("snapshot intervals are not strictly consecutive")
        return cls(np.stack([s.stacked() for s in snapshots]), grid, t0=ts[0])


# ---------------------------------------------------------------------------
# trajectories -> flows

def _check_points(traj_id, pts: np.ndarray) -> np.ndarray:
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise TrajectoryError(traj_id, "expected (t, lat, lon) triples")
    if not np.all(np.isfinite(pts)):
        raise TrajectoryError(traj_id, "non-finite coordinate")
    if np.any(np.abs(pts[:, 1]) > 90) or np.any(np.abs(pts[:, 2]) > 180):
        raise TrajectoryError(traj_id, "latitude/longitude out of range")
    if np.any(pts[:, 0] != np.round(pts[:, 0])):
        raise TrajectoryError(traj_id, "interval tag is not an integer")
    return pts


def compute_inflow_outflow(trajectories: Mapping, grid: GridSpec, t: int) -> FlowSnapshot:
    """Count region crossings of every trajectory during interval ``t``.

    ``trajectories`` maps a trajectory id to an ordered sequence of
    ``(interval, lat, lon)`` points. A transition between consecutive points
    is attributed to the interval of its earlier point. Entering a region
    counts one inflow there, leaving it one outflow; points outside the grid
    belong to no region.
    """
    if not isinstance(t, (int, np.integer)) or t < 0:
        raise ConfigError(f"invalid interval index {t!r}")
    n = grid.height * grid.width
    inflow = np.zeros(n, dtype=np.int64)
    outflow = np.zeros(n, dtype=np.int64)
    for traj_id, points in trajectories.items():
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3) if len(points) else np.empty((0, 3))
        pts = _check_points(traj_id, pts)
        if len(pts) < 2:
            continue
        cell = grid.locate(pts[:, 1], pts[:, 2])
        prev, nxt = cell[:-1], cell[1:]
        active = (pts[:-1, 0] == t) & (prev != nxt)
        entering = nxt[active & (nxt >= 0)]
        leaving = prev[active & (prev >= 0)]
        np.add.at(inflow, entering, 1)
        np.add.at(outflow, leaving, 1)
    return FlowSnapshot(inflow.reshape(grid.shape).astype(np.float64),
                        outflow.reshape(grid.shape).astype(np.float64), int(t))


def read_trajectories_csv(path) -> dict:
    """Read ``traj_id, t, lat, lon`` rows; a header row is optional."""
    out: dict = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].startswith("#"):
                continue
            if lineno == 1 and row[0].strip().lower() == "traj_id":
                continue
            if len(row) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            tid = row[0].strip()
            try:
                point = (int(row[1]), float(row[2]), float(row[3]))
            except ValueError as exc:
                raise TrajectoryError(tid, f"line {lineno}: {exc}") from None
            out.setdefault(tid, []).append(point)
    return out


def flows_from_trajectories(trajectories: Mapping, grid: GridSpec, t_start: int, t_stop: int) -> FlowSeries:
    snaps = [compute_inflow_outflow(trajectories, grid, t) for t in range(t_start, t_stop)]
    return FlowSeries.from_snapshots(snaps, grid)


# ---------------------------------------------------------------------------
# min-max scaling

@dataclass(frozen=True)
class NormStats:
    min: np.ndarray  # per channel
    max: np.ndarray
    target: tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self):
        lo, hi = self.target
        if not lo < hi:
            raise ConfigError(f"target range must be increasing, got {self.target}")
        mn = np.atleast_1d(np.asarray(self.min, dtype=np.float64))
        mx = np.atleast_1d(np.asarray(self.max, dtype=np.float64))
        if np.any(mx <= mn):
            raise DegenerateScaleError(f"channel max must exceed min (min={mn}, max={mx})")
        object.__setattr__(self, "min", mn)
        object.__setattr__(self, "max", mx)
        object.__setattr__(self, "target", (float(lo), float(hi)))

    def to_dict(self) -> dict:
        return {"min": self.min.tolist(), "max": self.max.tolist(), "target": list(self.target)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "NormStats":
        return cls(np.asarray(d["min"]), np.asarray(d["max"]), tuple(d["target"]))


def minmax_fit(series: FlowSeries | np.ndarray, n_train: int | None = None,
               target: tuple[float, float] = (-1.0, 1.0)) -> NormStats:
    """Per-channel extremes over the first ``n_train`` snapshots.

    Pass ``n_train`` so that validation and test intervals never leak into
    the statistics.
    """
    flows = series.flows if isinstance(series, FlowSeries) else np.asarray(series)
    if n_train is not None:
        flows = flows[:n_train]
    if flows.size == 0:
        raise DataError("cannot fit scaling statistics on an empty series")
    axes = (0,) + tuple(range(2, flows.ndim))
    return NormStats(flows.min(axis=axes), flows.max(axis=axes), target)


def _channel_view(v: np.ndarray, ndim: int, axis: int) -> np.ndarray:
    shape = [1] * ndim
    shape[axis] = -1
    return v.reshape(shape)


def minmax_apply(x, stats: NormStats, channel_axis: int = -3):
    """Affine map of ``[min, max]`` onto the target range, per channel.

    Values outside ``[min, max]`` extrapolate linearly.
    """
    x = np.asarray(x, dtype=np.float64)
    mn = _channel_view(stats.min, x.ndim, channel_axis)
    mx = _channel_view(stats.max, x.ndim, channel_axis)
    lo, hi = stats.target
    return lo + (x - mn) * ((hi - lo) / (mx - mn))


def minmax_invert(y, stats: NormStats, channel_axis: int = -3):
    y = np.asarray(y, dtype=np.float64)
    mn = _channel_view(stats.min, y.ndim, channel_axis)
    mx = _channel_view(stats.max, y.ndim, channel_axis)
    lo, hi = stats.target
    return mn + (y - lo) * ((mx - mn) / (hi - lo))


# ---------------------------------------------------------------------------
# external factors

@dataclass(frozen=True)
class ExternalField:
    name: str
    kind: str  # "categorical" | "continuous"
    categories: tuple = ()
    range: tuple[float, float] | None = None

    def __post_init__(self):
        if self.kind == "categorical":
            if not self.categories:
                raise ConfigError(f"categorical field {self.name!r} needs categories")
        elif self.kind == "continuous":
            if self.range is None or not self.range[1] > self.range[0]:
                raise ConfigError(f"continuous field {self.name!r} needs an increasing range")
        else:
            raise ConfigError(f"unknown field kind {self.kind!r}")

    @property
    def width(self) -> int:
        return len(self.categories) if self.kind == "categorical" else 1

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind}
        if self.kind == "categorical":
            d["categories"] = list(self.categories)
        else:
            d["range"] = list(self.range)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExternalField":
        if d["kind"] == "categorical":
            return cls(d["name"], "categorical", categories=tuple(d["categories"]))
        return cls(d["name"], "continuous", range=tuple(d["range"]))


@dataclass(frozen=True)
class ExternalSchema:
    fields: tuple[ExternalField, ...] = ()

    @property
    def width(self) -> int:
        return sum(f.width for f in self.fields)

    def to_list(self) -> list:
        return [f.to_dict() for f in self.fields]

    @classmethod
    def from_list(cls, items: Iterable[Mapping]) -> "ExternalSchema":
        return cls(tuple(ExternalField.from_dict(d) for d in items))


@dataclass(frozen=True)
class ExternalVector:
    values: np.ndarray
    schema: ExternalSchema = field(default_factory=ExternalSchema)


def encode_external(record: Mapping, schema: ExternalSchema) -> ExternalVector:
    """One-hot the categorical fields and scale continuous ones into [0, 1],
    in schema order."""
    parts = []
    for f in schema.fields:
        if f.name not in record:
            raise DataError(f"external record is missing field {f.name!r}")
        v = record[f.name]
        if f.kind == "categorical":
            if v not in f.categories:
                raise DataError(f"{f.name}: unknown category {v!r}; allowed: {list(f.categories)}")
            block = np.zeros(len(f.categories))
            block[f.categories.index(v)] = 1.0
            parts.append(block)
        else:
            lo, hi = f.range
            x = float(v)
            if not math.isfinite(x):
                raise DataError(f"{f.name}: non-finite value {v!r}")
            if x < lo or x > hi:
                warnings.warn(f"{f.name}={x} outside [{lo}, {hi}], clamped", stacklevel=2)
                x = min(max(x, lo), hi)
            parts.append(np.array([(x - lo) / (hi - lo)]))
    values = np.concatenate(parts) if parts else np.zeros(0)
    return ExternalVector(values, schema)


DAYS = ("Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday")

CALENDAR_SCHEMA = ExternalSchema((
    ExternalField("DayOfWeek", "categorical", categories=DAYS),
    ExternalField("Weekend", "categorical", categories=(False, True)),
))
