"""Assemble fused model inputs from closeness, period and trend windows and
split them chronologically into train / validation / test."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DataError, InsufficientHistory
from .flow_core import FlowSeries, NormStats, minmax_apply, minmax_fit


@dataclass(frozen=True)
class FusionConfig:
    """Look-back window lengths.

    Trend windows step back by ``week_offset`` intervals, period windows by
    ``day_offset``; closeness takes the ``n_c`` most recent intervals,
    including the anchor.
    """

    n_c: int = 3
    n_p: int = 1
    n_q: int = 1
    day_offset: int = 48
    week_offset: int = 336

    def __post_init__(self):
        if min(self.n_c, self.n_p, self.n_q) < 0:
            raise ConfigError("window lengths must be non-negative")
        if self.n_c + self.n_p + self.n_q == 0:
            raise ConfigError("at least one of n_c, n_p, n_q must be positive")
        if self.day_offset < 1 or self.week_offset < 1:
            raise ConfigError("day_offset and week_offset must be >= 1")

    @classmethod
    def for_interval(cls, interval_minutes: int, **kw) -> "FusionConfig":
        day = (24 * 60) // interval_minutes
        return cls(day_offset=day, week_offset=7 * day, **kw)

    @property
    def n_frames(self) -> int:
        return self.n_c + self.n_p + self.n_q

    @property
    def flow_channels(self) -> int:
        return 2 * self.n_frames

    def fused_channels(self, n_w: int) -> int:
        return self.flow_channels + n_w

    def offsets(self) -> list[int]:
        """Look-back offsets in channel order: trend, period, closeness,
        each group oldest first."""
        trend = [k * self.week_offset for k in range(self.n_q, 0, -1)]
        period = [k * self.day_offset for k in range(self.n_p, 0, -1)]
        close = list(range(self.n_c - 1, -1, -1))
        return trend + period + close

    @property
    def max_offset(self) -> int:
        return max(self.offsets())

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class InputSample:
    """Flow part of the fused input plus the raw external vector.

    ``x`` holds the ``2 * (n_q + n_p + n_c)`` flow channels; the model
    embeds ``external`` into ``n_w`` leading channels, so the tensor the
    experts see has ``2 * (n_q + n_p + n_c) + n_w`` channels.
    """

    x: np.ndarray
    y: np.ndarray
    t: int
    external: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.float32))


def usable_anchors(n_steps: int, cfg: FusionConfig) -> range:
    return range(cfg.max_offset, n_steps - 1)


def build_sample(series: FlowSeries, externals, t: int, cfg: FusionConfig,
                 dtype=np.float32) -> InputSample:
    """Fused sample anchored at interval ``t`` (target is ``t + 1``).

    ``t`` is an index into ``series.flows``. Raises InsufficientHistory
    when the look-back or the target falls outside the series.
    """
    n = len(series)
    if t - cfg.max_offset < 0 or t + 1 >= n:
        raise InsufficientHistory(
            f"anchor {t}: needs {cfg.max_offset} steps of history and one step ahead in a series of {n}")
    idx = [t - o for o in cfg.offsets()]
    x = series.flows[idx].reshape(-1, *series.flows.shape[2:]).astype(dtype)
    y = series.flows[t + 1].astype(dtype)
    if externals is None:
        ext = np.zeros(0, dtype=dtype)
    else:
        externals = np.asarray(externals)
        if externals.ndim != 2 or externals.shape[0] != n:
            raise DataError(f"externals shape {externals.shape} does not cover {n} intervals")
        ext = externals[t + 1].astype(dtype)
    return InputSample(x, y, t, ext)


@dataclass
class SampleSet:
    """Stacked samples: X (N, 2L, h, w), E (N, n_ext), Y (N, 2, h, w)."""

    X: np.ndarray
    E: np.ndarray
    Y: np.ndarray
    anchors: np.ndarray

    def __len__(self) -> int:
        return len(self.anchors)

    def subset(self, idx) -> "SampleSet":
        return SampleSet(self.X[idx], self.E[idx], self.Y[idx], self.anchors[idx])


def stack_samples(samples: list[InputSample]) -> SampleSet:
    return SampleSet(
        np.stack([s.x for s in samples]),
        np.stack([s.external for s in samples]),
        np.stack([s.y for s in samples]),
        np.array([s.t for s in samples], dtype=np.int64),
    )


def split_counts(n: int) -> tuple[int, int, int]:
    """80/20 train+val/test, then 80/20 train/val, floors with at least one
    sample per split."""
    if n < 3:
        raise DataError(f"need at least 3 usable samples, have {n}")
    n_test = max(1, (n * 2) // 10)
    n_trval = n - n_test
    n_val = max(1, (n_trval * 2) // 10)
    n_train = n_trval - n_val
    if n_train < 1:
        raise DataError(f"need at least 3 usable samples, have {n}")
    return n_train, n_val, n_test


def split_anchors(anchors) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    anchors = np.asarray(anchors)
    a, b, _ = split_counts(len(anchors))
    return anchors[:a], anchors[a:a + b], anchors[a + b:]


def make_dataset(series: FlowSeries, externals, cfg: FusionConfig) -> tuple[SampleSet, SampleSet, SampleSet]:
    """Build every sample with full history and split contiguously in time."""
    if len(series) == 0:
        raise DataError("empty series")
    samples = [build_sample(series, externals, t, cfg) for t in usable_anchors(len(series), cfg)]
    n_tr, n_va, _ = split_counts(len(samples))
    full = stack_samples(samples)
    return (full.subset(slice(0, n_tr)), full.subset(slice(n_tr, n_tr + n_va)),
            full.subset(slice(n_tr + n_va, None)))


@dataclass
class Dataset:
    train: SampleSet
    val: SampleSet
    test: SampleSet
    stats: NormStats
    cfg: FusionConfig


def prepare_dataset(series: FlowSeries, externals, cfg: FusionConfig,
                    target: tuple[float, float] = (-1.0, 1.0), stats: NormStats | None = None) -> Dataset:
    """Split, fit scaling on the training intervals only (unless ``stats``
    is supplied), then build normalized samples."""
    anchors = usable_anchors(len(series), cfg)
    if len(anchors) == 0:
        raise DataError(f"series of {len(series)} steps is too short for a look-back of {cfg.max_offset}")
    if stats is None:
        tr, _, _ = split_anchors(np.arange(anchors.start, anchors.stop))
        stats = minmax_fit(series, n_train=int(tr[-1]) + 2, target=target)
    scaled = FlowSeries(minmax_apply(series.flows, stats), series.grid, series.t0, series.start)
    train, val, test = make_dataset(scaled, externals, cfg)
    return Dataset(train, val, test, stats, cfg)
