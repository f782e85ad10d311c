"""
Space-time velocity field on 500 m x 1 min patches.

Aggregates simulator samples into patch means, classifies missing patches by
what the nearest traffic counter reports, derives upper bounds for the missing
velocities and produces synthetic DFOS-style observations for twin runs.
"""
import logging
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
import pandas as pd

from config import SEGMENT_CELLS, SEGMENT_LENGTH_M, STEPS_PER_MINUTE
from snfs import cells_to_kmh

logger = logging.getLogger(__name__)


class PatchClass(IntEnum):
    OBSERVED = 0
    CLASS1 = 1   # missing, counter on segment has a reading
    CLASS2 = 2   # missing, no counter reading


@dataclass
class PatchGrid:
    """
    M x T patch velocities in km/h. Row m is segment m (upstream first),
    column t is absolute minute first_minute + t. NaN marks a missing patch.
    """
    values: np.ndarray
    first_minute: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError(f"patch grid must be 2-D (segments x minutes), got shape {self.values.shape}")

    @classmethod
    def empty(cls, segments, minutes, first_minute=0):
        return cls(np.full((segments, minutes), np.nan), first_minute)

    @property
    def segments(self):
        return self.values.shape[0]

    @property
    def minutes(self):
        return self.values.shape[1]

    @property
    def last_minute(self):
        return self.first_minute + self.minutes - 1

    @property
    def present(self):
        return ~np.isnan(self.values)

    @property
    def missing(self):
        return np.isnan(self.values)

    @property
    def missing_fraction(self):
        return float(self.missing.mean()) if self.values.size else 0.0

    def copy(self):
        return PatchGrid(self.values.copy(), self.first_minute)

    def window(self, start_minute, stop_minute):
        """Columns for absolute minutes [start_minute, stop_minute)."""
        lo = start_minute - self.first_minute
        hi = stop_minute - self.first_minute
        if lo < 0 or hi > self.minutes or lo > hi:
            raise ValueError(
                f"minutes [{start_minute}, {stop_minute}) outside grid "
                f"[{self.first_minute}, {self.first_minute + self.minutes})"
            )
        return PatchGrid(self.values[:, lo:hi].copy(), start_minute)

    def to_frame(self):
        """Long format: minute, segment, mean_velocity_kmh (NaN when missing)."""
        minutes = np.repeat(np.arange(self.minutes) + self.first_minute, self.segments)
        segments = np.tile(np.arange(self.segments), self.minutes)
        return pd.DataFrame({
            'minute': minutes,
            'segment': segments,
            'mean_velocity_kmh': self.values.T.ravel(),
        })

    @classmethod
    def from_frame(cls, df, segments=None):
        """Inverse of to_frame; minutes absent from the frame become missing columns."""
        if df.empty:
            raise ValueError("no patch rows")
        minute = df['minute'].to_numpy(dtype=np.int64)
        segment = df['segment'].to_numpy(dtype=np.int64)
        first = int(minute.min())
        n_min = int(minute.max()) - first + 1
        n_seg = int(segment.max()) + 1 if segments is None else segments
        if segment.max() >= n_seg:
            raise ValueError(f"segment {segment.max()} outside road with {n_seg} segments")
        grid = cls.empty(n_seg, n_min, first)
        grid.values[segment, minute - first] = df['mean_velocity_kmh'].to_numpy(dtype=float)
        return grid


@dataclass
class SegmentClassMap:
    """Patch classes plus the counter speed that decided each Class 1 patch."""
    kinds: np.ndarray
    counter_velocity: np.ndarray
    first_minute: int = 0
    degraded: int = 0

    def counts(self):
        return {kind.name.lower(): int((self.kinds == kind).sum()) for kind in PatchClass}


@dataclass(frozen=True)
class MaskSpec:
    """Synthetic masking: patches slower than threshold drop with mask_prob_below."""
    threshold_kmh: float
    mask_prob_below: float
    mask_prob_above: float
    noise_sigma_kmh: float = 0.0

    def __post_init__(self):
        if self.threshold_kmh <= 0:
            raise ValueError(f"threshold_kmh must be > 0, got {self.threshold_kmh}")
        for name in ('mask_prob_below', 'mask_prob_above'):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if self.noise_sigma_kmh < 0:
            raise ValueError(f"noise_sigma_kmh must be >= 0, got {self.noise_sigma_kmh}")


def aggregate(log, road):
    """
    Mean velocity of all samples per (segment, minute).

    Args:
        log: SampleLog from run_scenario
        road: RoadConfig whose length is a whole number of segments

    Returns:
        PatchGrid with NaN where no vehicle was sampled
    """
    if road.length_cells % SEGMENT_CELLS:
        raise ValueError(f"road length {road.length_cells} cells is not a multiple of {SEGMENT_CELLS}")
    M, T = road.segments, log.minutes
    if len(log) == 0:
        return PatchGrid.empty(M, T, log.first_minute)

    flat = (log.cell // SEGMENT_CELLS) * T + log.step // STEPS_PER_MINUTE
    sums = np.bincount(flat, weights=cells_to_kmh(log.velocity.astype(float)), minlength=M * T)
    counts = np.bincount(flat, minlength=M * T)
    values = np.full(M * T, np.nan)
    occupied = counts > 0
    values[occupied] = sums[occupied] / counts[occupied]
    return PatchGrid(values.reshape(M, T), log.first_minute)


def densify(grid, road):
    """Fill empty patches with the road's mean lane speed limit."""
    out = grid.copy()
    out.values[out.missing] = road.mean_limit_kmh
    return out


def counter_segment(position_km, segments):
    """Segment index holding a counter; the downstream end belongs to the last segment."""
    return min(int(position_km * 1000 // SEGMENT_LENGTH_M), segments - 1)


def counter_readings(counters, grid, road):
    """
    Per-patch counter speed (mean over counters sharing a segment).

    Args:
        counters: Frame with minute, position_km, speed_kmh columns
        grid: PatchGrid whose minutes are looked up
        road: RoadConfig naming the counter positions

    Returns:
        np.ndarray (M, T) of km/h, NaN where no reading exists
    """
    M, T = grid.segments, grid.minutes
    sums = np.zeros((M, T))
    hits = np.zeros((M, T), dtype=int)
    if counters is None or counters.empty:
        return np.full((M, T), np.nan)

    cols = counters['minute'].to_numpy(dtype=np.int64) - grid.first_minute
    in_window = (cols >= 0) & (cols < T) & counters['speed_kmh'].notna().to_numpy()
    positions = counters['position_km'].to_numpy(dtype=float)
    speeds = counters['speed_kmh'].to_numpy(dtype=float)

    for km in road.counter_positions_km:
        rows = in_window & np.isclose(positions, km)
        if not rows.any():
            continue
        seg = counter_segment(km, M)
        np.add.at(sums[seg], cols[rows], speeds[rows])
        np.add.at(hits[seg], cols[rows], 1)

    readings = np.full((M, T), np.nan)
    readings[hits > 0] = sums[hits > 0] / hits[hits > 0]
    return readings


def classify(grid, road, counters):
    """
    Partition patches into Observed, Class 1 and Class 2.

    A missing patch is Class 1 when a counter on its segment has a reading for
    that minute, whatever its speed, and carries that reading as v_tc. Without
    a reading it is Class 2; when the segment has a counter but the minute's
    reading is absent the patch is also counted as degraded.
    """
    readings = counter_readings(counters, grid, road)
    has_counter = np.zeros(grid.segments, dtype=bool)
    for km in road.counter_positions_km:
        has_counter[counter_segment(km, grid.segments)] = True

    missing = grid.missing
    kinds = np.full(grid.values.shape, PatchClass.OBSERVED, dtype=np.int8)
    has_reading = missing & ~np.isnan(readings)
    kinds[missing] = PatchClass.CLASS2
    kinds[has_reading] = PatchClass.CLASS1

    degraded = int((missing & has_counter[:, None] & np.isnan(readings)).sum())
    if degraded:
        logger.warning(f"{degraded} missing patch(es) on counter segments lack a reading; treated as Class 2")

    counter_velocity = np.where(has_reading, readings, np.nan)
    return SegmentClassMap(kinds, counter_velocity, grid.first_minute, degraded)


def _interp_rows(values):
    """Linear interpolation along axis 1 from the present entries; rows with none stay NaN."""
    out = np.full(values.shape, np.nan)
    x = np.arange(values.shape[1])
    for i, row in enumerate(values):
        known = ~np.isnan(row)
        if known.any():
            out[i] = np.interp(x, x[known], row[known])
    return out


def interpolate_bounds(grid):
    """
    Upper bound u_max for every patch of a window.

    Linear interpolation along time within each segment and along space within
    each minute, nearest value beyond the ends; the mean when both directions
    give a value. Present patches keep their own value and anything still
    undetermined gets the window maximum.

    Raises:
        ValueError: the window has no present value
    """
    if not grid.present.any():
        raise ValueError("window has no observed patch; cannot bound missing velocities")
    values = grid.values
    along_time = _interp_rows(values)
    along_space = _interp_rows(values.T).T

    bounds = np.where(
        np.isnan(along_time), along_space,
        np.where(np.isnan(along_space), along_time, (along_time + along_space) / 2),
    )
    bounds[np.isnan(bounds)] = np.nanmax(values)
    bounds[grid.present] = values[grid.present]
    return bounds


def mask_synthetic(grid, spec, seed):
    """
    Noisy, partially missing copy of a truth grid.

    Gaussian noise (clamped at 1 km/h) is drawn for every patch first, then one
    uniform per patch decides masking with a probability chosen by the
    noise-free truth value.
    """
    rng = np.random.default_rng(seed)
    truth = grid.values
    noisy = truth.copy()
    if spec.noise_sigma_kmh > 0:
        noisy = noisy + rng.normal(0.0, spec.noise_sigma_kmh, truth.shape)
    noisy = np.maximum(noisy, 1.0)

    prob = np.where(truth < spec.threshold_kmh, spec.mask_prob_below, spec.mask_prob_above)
    drop = rng.random(truth.shape) < prob
    noisy[drop | np.isnan(truth)] = np.nan
    return PatchGrid(noisy, grid.first_minute)
