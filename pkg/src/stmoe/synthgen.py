"""Synthetic city flows built from planted functional patterns.

Each pattern pairs a spatial mask with a weekly in/out intensity profile.
Flows are Poisson counts of the summed intensities, so every region mixes
the patterns whose masks cover it, and the masks serve as ground truth for
disentanglement scoring.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .flow_core import CALENDAR_SCHEMA, DAYS, ExternalSchema, FlowSeries, GridSpec, encode_external

START_MONDAY = "2015-03-02T00:00:00"


@dataclass
class PatternSpec:
    name: str
    spatial_mask: np.ndarray     # (h, w) in [0, 1]
    weekly_profile: np.ndarray   # (2, steps_per_week) trips / interval
    noise_scale: float = 1.0     # multiplies the pattern's intensity

    def __post_init__(self):
        self.spatial_mask = np.asarray(self.spatial_mask, dtype=np.float64)
        self.weekly_profile = np.asarray(self.weekly_profile, dtype=np.float64)
        if self.spatial_mask.min() < 0 or self.spatial_mask.max() > 1:
            raise ConfigError(f"pattern {self.name!r}: mask values must lie in [0, 1]")
        if self.weekly_profile.ndim != 2 or self.weekly_profile.shape[0] != 2:
            raise ConfigError(f"pattern {self.name!r}: profile must have shape (2, steps_per_week)")
        if self.weekly_profile.min() < 0 or self.noise_scale < 0:
            raise ConfigError(f"pattern {self.name!r}: profile and noise_scale must be non-negative")

    def describe(self) -> dict:
        prof = self.weekly_profile
        return {"name": self.name, "noise_scale": self.noise_scale,
                "mask_sum": float(self.spatial_mask.sum()),
                "mean_inflow": float(prof[0].mean()), "mean_outflow": float(prof[1].mean()),
                "peak_inflow": float(prof[0].max()), "peak_outflow": float(prof[1].max())}


@dataclass
class SynthConfig:
    grid: GridSpec
    patterns: list
    weeks: int = 4
    seed: int = 0
    weekend_shift: bool = True
    noise: bool = True  # False: emit the expected intensity itself
    name: str = "custom"

    def __post_init__(self):
        if not self.patterns:
            raise ConfigError("at least one pattern is required")
        if self.weeks < 2:
            raise ConfigError("weeks must be >= 2")
        q_week = 7 * self.grid.steps_per_day
        for p in self.patterns:
            if p.spatial_mask.shape != self.grid.shape:
                raise ConfigError(f"pattern {p.name!r}: mask shape {p.spatial_mask.shape} != grid {self.grid.shape}")
            if p.weekly_profile.shape[1] != q_week:
                raise ConfigError(f"pattern {p.name!r}: profile length {p.weekly_profile.shape[1]} != {q_week}")

    @property
    def steps_per_week(self) -> int:
        return 7 * self.grid.steps_per_day


@dataclass
class SynthData:
    series: FlowSeries
    externals: np.ndarray         # (T, n_ext)
    schema: ExternalSchema
    truth_masks: np.ndarray       # (M, h, w)
    intensity: np.ndarray         # (T, 2, h, w) expected flow
    patterns: list = field(default_factory=list)


def calendar_externals(n_steps: int, steps_per_day: int) -> np.ndarray:
    rows = []
    for t in range(n_steps):
        day = (t // steps_per_day) % 7
        rows.append(encode_external({"DayOfWeek": DAYS[day], "Weekend": day >= 5}, CALENDAR_SCHEMA).values)
    return np.asarray(rows, dtype=np.float32)


def generate(cfg: SynthConfig) -> SynthData:
    """Poisson flows over ``cfg.weeks`` weeks starting on a Monday at 00:00."""
    q_week = cfg.steps_per_week
    T = cfg.weeks * q_week
    h, w = cfg.grid.shape
    weekly = np.zeros((q_week, 2, h, w))
    for p in cfg.patterns:
        prof = p.weekly_profile
        if not cfg.weekend_shift:
            weekday = prof[:, :5 * cfg.grid.steps_per_day].reshape(2, 5, -1).mean(axis=1)
            prof = np.tile(weekday, (1, 7))
        weekly += p.noise_scale * prof.T[:, :, None, None] * p.spatial_mask[None, None]
    if not np.any(weekly > 0):
        raise DataError("total intensity is zero everywhere")
    intensity = np.tile(weekly, (cfg.weeks, 1, 1, 1))
    if cfg.noise:
        rng = np.random.default_rng(cfg.seed)
        flows = np.empty_like(intensity)
        for t in range(T):  # sequential in t keeps draws reproducible across grid sizes
            flows[t] = rng.poisson(intensity[t])
    else:
        flows = intensity.copy()
    series = FlowSeries(flows.astype(np.float32), cfg.grid, t0=0, start=START_MONDAY)
    ext = calendar_externals(T, cfg.grid.steps_per_day)
    masks = np.stack([p.spatial_mask for p in cfg.patterns]).astype(np.float32)
    return SynthData(series, ext, CALENDAR_SCHEMA, masks, intensity, [p.describe() for p in cfg.patterns])


# ---------------------------------------------------------------------------
# profiles and masks for the presets

def _bump(hours: np.ndarray, centre: float, width: float) -> np.ndarray:
    return np.exp(-0.5 * ((hours - centre) / width) ** 2)


def daily_curve(steps_per_day: int, base: float, peaks) -> np.ndarray:
    """Base level plus Gaussian bumps given as (hour, width_hours, height)."""
    hours = np.arange(steps_per_day) * 24.0 / steps_per_day
    out = np.full(steps_per_day, float(base))
    for centre, width, height in peaks:
        out += height * _bump(hours, centre, width)
    return out


def weekly_profile(steps_per_day: int, weekday_in, weekday_out, weekend_in, weekend_out) -> np.ndarray:
    """Stack per-day curves into a (2, 7 * steps_per_day) Monday-first week."""
    inflow = np.concatenate([weekday_in] * 5 + [weekend_in] * 2)
    outflow = np.concatenate([weekday_out] * 5 + [weekend_out] * 2)
    assert inflow.shape[0] == 7 * steps_per_day
    return np.stack([inflow, outflow])


def commuting_profile(q: int, scale: float = 1.0) -> np.ndarray:
    """Office-like: arrivals peak at 08:30 and 18:00, departures at 12:00 and
    18:30; weekends keep a fifth of the weekday peaks."""
    win = daily_curve(q, 1, [(8.5, 1.0, 24), (18.0, 1.0, 14)])
    wout = daily_curve(q, 1, [(12.0, 1.0, 8), (18.5, 1.0, 26)])
    ein = daily_curve(q, 1, [(8.5, 1.0, 5), (18.0, 1.0, 3)])
    eout = daily_curve(q, 1, [(12.0, 1.0, 2), (18.5, 1.0, 5)])
    return scale * weekly_profile(q, win, wout, ein, eout)


def residential_profile(q: int, scale: float = 1.0) -> np.ndarray:
    """Departures in the weekday morning, returns in the evening; late and
    flat on weekends."""
    win = daily_curve(q, 2, [(19.0, 1.5, 16)])
    wout = daily_curve(q, 2, [(7.5, 1.0, 20)])
    ein = daily_curve(q, 2, [(17.0, 3.0, 8)])
    eout = daily_curve(q, 2, [(10.5, 2.5, 8)])
    return scale * weekly_profile(q, win, wout, ein, eout)


def commercial_profile(q: int, scale: float = 1.0) -> np.ndarray:
    """Midday and evening activity, stronger on weekends."""
    win = daily_curve(q, 1, [(12.5, 2.0, 8), (19.5, 1.5, 6)])
    wout = daily_curve(q, 1, [(14.0, 2.0, 7), (21.5, 1.5, 7)])
    ein = daily_curve(q, 1, [(13.0, 2.5, 18), (19.5, 2.0, 12)])
    eout = daily_curve(q, 1, [(15.0, 2.5, 16), (22.0, 1.5, 13)])
    return scale * weekly_profile(q, win, wout, ein, eout)


def expressway_profile(q: int, scale: float = 1.0) -> np.ndarray:
    """Heavy around the clock with mild rush-hour shoulders; same on weekends
    at a lower level."""
    win = daily_curve(q, 10, [(8.0, 1.5, 8), (18.0, 1.5, 8)])
    wout = daily_curve(q, 10, [(8.5, 1.5, 8), (18.5, 1.5, 8)])
    ein = daily_curve(q, 7, [(14.0, 4.0, 4)])
    eout = daily_curve(q, 7, [(14.5, 4.0, 4)])
    return scale * weekly_profile(q, win, wout, ein, eout)


def blob_mask(shape, centre, width) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
    d2 = (ii - centre[0]) ** 2 + (jj - centre[1]) ** 2
    return np.exp(-0.5 * d2 / width ** 2)


def ring_mask(shape, centre, radius, width) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
    r = np.hypot(ii - centre[0], jj - centre[1])
    return np.exp(-0.5 * ((r - radius) / width) ** 2)


def partition_masks(shape, centres, sharpness: float = 1.0) -> np.ndarray:
    """Soft Voronoi tiling: every region belongs mostly to its nearest
    centre, with blended borders. Masks sum to one in each region."""
    ii, jj = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
    logits = np.stack([-sharpness * ((ii - a) ** 2 + (jj - b) ** 2) for a, b in centres])
    w = np.exp(logits - logits.max(axis=0))
    return w / w.sum(axis=0)


PRESETS = ("tiny8", "ring16")


def builtin_city(name: str, seed: int = 0) -> SynthConfig:
    """Preset cities.

    tiny8
        8x8 grid, 30-minute steps, 4 weeks; commuting, residential and
        commercial districts tile the city with blended borders. Every
        region carries flow, so the attention an expert gets in each
        region is identifiable.
    ring16
        16x16 grid, 30-minute steps, 4 weeks; a central business district,
        a ring expressway, residential outskirts and a commercial hub.
    """
    if name == "tiny8":
        grid = GridSpec(8, 8, (39.80, 40.00, 116.25, 116.50), 30)
        q = grid.steps_per_day
        patterns = [
            PatternSpec(name, m, prof(q)) for name, m, prof in zip(
                ("commuting", "residential", "commercial"),
                partition_masks(grid.shape, [(1.5, 5.5), (5.5, 1.5), (6.0, 6.5)]),
                (commuting_profile, residential_profile, commercial_profile))
        ]
        return SynthConfig(grid, patterns, weeks=4, seed=seed, weekend_shift=True, name=name)
    if name == "ring16":
        grid = GridSpec(16, 16, (39.70, 40.10, 116.10, 116.70), 30)
        q = grid.steps_per_day
        c = (7.5, 7.5)
        cbd = blob_mask(grid.shape, c, 1.4)
        ring = ring_mask(grid.shape, c, 5.0, 0.7)
        ii, jj = np.meshgrid(np.arange(16), np.arange(16), indexing="ij")
        # outskirts start beyond the ring so no two masks correlate past 0.2
        outskirts = np.clip((np.hypot(ii - c[0], jj - c[1]) - 8.0) / 3.5, 0, 1) * (jj < 8)
        hub = blob_mask(grid.shape, (13.0, 12.5), 1.3)
        patterns = [
            PatternSpec("commuting", cbd, commuting_profile(q)),
            PatternSpec("expressway", ring, expressway_profile(q)),
            PatternSpec("residential", outskirts, residential_profile(q)),
            PatternSpec("commercial", hub, commercial_profile(q)),
        ]
        return SynthConfig(grid, patterns, weeks=4, seed=seed, weekend_shift=True, name=name)
    raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
