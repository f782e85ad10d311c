"""
Missing-velocity imputation pipeline.

1. Simulate every lattice scenario over the trailing window, warmed up from an
   empty road on the origin counter's inflow
2. Classify the trailing window's missing patches and build their priors
3. Assimilate the window minute by minute with the particle filter
4. Fill missing patches from the MAP scenario's simulated field

Also holds the scenario lattice, MAE evaluation and the synthetic twin.
"""
import itertools
import logging
from dataclasses import dataclass, field
from functools import partial
from multiprocessing import Pool
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from assimilation import (
    LikelihoodConfig,
    ParticleEnsemble,
    ScenarioSet,
    assimilate_window,
    map_index,
)
from config import (
    CADENCE_MINUTES,
    CI_GRID,
    DEFAULT_SEED,
    REJUVENATION_PROBABILITY,
    STEPS_PER_MINUTE,
    FULL_GRID,
    WARMUP_MINUTES,
    WINDOW_MINUTES,
    derive_seed,
)
from priors import build_priors
from snfs import InflowRecord, InflowSchedule, ModelParams, RoadConfig, cells_to_kmh, run_scenario
from velocity_field import (
    PatchGrid,
    aggregate,
    classify,
    counter_segment,
    densify,
    interpolate_bounds,
    mask_synthetic,
)

logger = logging.getLogger(__name__)

PARAMETER_NAMES = ('p_bn', 'p', 'q', 'r')


@dataclass(frozen=True)
class GridSpec:
    """(lower, upper, increment) per parameter."""
    p_bn: Tuple[float, float, float] = FULL_GRID['p_bn']
    p: Tuple[float, float, float] = FULL_GRID['p']
    q: Tuple[float, float, float] = FULL_GRID['q']
    r: Tuple[float, float, float] = FULL_GRID['r']

    def __post_init__(self):
        for name in PARAMETER_NAMES:
            self.lattice(name)

    @classmethod
    def full(cls):
        return cls(**FULL_GRID)

    @classmethod
    def ci(cls):
        return cls(**CI_GRID)

    def lattice(self, name):
        """Values lower + k * increment, rounded to 1e-6."""
        lower, upper, increment = getattr(self, name)
        if upper < lower:
            raise ValueError(f"{name}: upper {upper} below lower {lower}")
        if upper == lower:
            return np.array([round(lower, 6)])
        if increment <= 0:
            raise ValueError(f"{name}: increment must be > 0, got {increment}")
        steps = (upper - lower) / increment
        if abs(steps - round(steps)) > 1e-6:
            raise ValueError(f"{name}: ({upper} - {lower}) / {increment} = {steps:.6f} is not an integer")
        return np.round(lower + np.arange(int(round(steps)) + 1) * increment, 6)

    @property
    def shape(self):
        return tuple(len(self.lattice(name)) for name in PARAMETER_NAMES)

    def contains(self, params, tol=1e-6):
        return all(
            np.isclose(self.lattice(name), value, atol=tol, rtol=0).any()
            for name, value in zip(PARAMETER_NAMES, params.as_tuple())
        )


@dataclass
class PipelineConfig:
    road: RoadConfig
    grid: GridSpec = field(default_factory=GridSpec)
    window: int = WINDOW_MINUTES
    cadence: int = CADENCE_MINUTES
    warmup: int = WARMUP_MINUTES
    seed: int = DEFAULT_SEED
    particles: Optional[int] = None
    workers: int = 1
    likelihood: LikelihoodConfig = field(default_factory=LikelihoodConfig)
    rejuvenation: float = REJUVENATION_PROBABILITY
    progress: bool = False

    def __post_init__(self):
        if self.window < 1:
            raise ValueError(f"window must be >= 1 minute, got {self.window}")
        if self.warmup < 0:
            raise ValueError(f"warmup must be >= 0 minutes, got {self.warmup}")
        if self.cadence < 1:
            raise ValueError(f"cadence must be >= 1 minute, got {self.cadence}")


@dataclass
class MapEntry:
    minute: int
    params: ModelParams
    particles: int


@dataclass
class PipelineResult:
    imputed: PatchGrid
    imputed_mask: np.ndarray
    map_trace: List[MapEntry]
    posterior: pd.DataFrame
    marginals: pd.DataFrame
    map_grid: PatchGrid
    warnings: List[str] = field(default_factory=list)


@dataclass
class EvalReport:
    mae_missing: float
    mae_observed: float
    n_missing: int
    n_observed: int

    def to_frame(self):
        return pd.DataFrame([{
            'mae_missing_kmh': self.mae_missing,
            'mae_observed_kmh': self.mae_observed,
            'n_missing': self.n_missing,
            'n_observed': self.n_observed,
        }])


@dataclass
class TwinData:
    truth: PatchGrid
    observed: PatchGrid
    counters: pd.DataFrame
    inflow: InflowSchedule
    saturation_minutes: List[int] = field(default_factory=list)


def build_scenario_grid(spec):
    """Cartesian product of the four lattices, last parameter varying fastest."""
    lattices = [spec.lattice(name) for name in PARAMETER_NAMES]
    return [ModelParams(*(float(v) for v in combo)) for combo in itertools.product(*lattices)]


def _simulate_one(task, road, inflow, anchor, warmup, minutes, seed):
    index, params = task
    log = run_scenario(road, params, inflow, warmup + minutes, derive_seed(seed, index), first_minute=anchor)
    grid = densify(aggregate(log, road), road)
    return grid.values[:, warmup:], log.saturation_minutes


def simulate_ensemble(params, road, inflow, start_minute, minutes, warmup=WARMUP_MINUTES,
                      seed=DEFAULT_SEED, workers=1, shape=None, progress=False):
    """
    Simulate every scenario over [start_minute, start_minute + minutes).

    Each run starts `warmup` minutes earlier on an empty road; the warm-up
    columns are discarded. Scenario i uses derive_seed(seed, i).

    Returns:
        ScenarioSet with grids (S, M, minutes)
    """
    anchor = start_minute - warmup
    missing = inflow.missing_minutes(anchor, start_minute + minutes)
    if missing:
        raise ValueError(f"inflow does not cover minute(s) {missing[:5]} needed by the ensemble")
    if not params:
        return ScenarioSet([], np.zeros((0, road.segments, minutes)), start_minute, shape)

    tasks = list(enumerate(params))
    worker = partial(_simulate_one, road=road, inflow=inflow, anchor=anchor,
                     warmup=warmup, minutes=minutes, seed=seed)
    bar = dict(total=len(tasks), desc="Simulating scenarios", disable=not progress)
    if workers > 1:
        with Pool(workers) as pool:
            results = list(tqdm(pool.imap(worker, tasks, chunksize=max(1, len(tasks) // (4 * workers))), **bar))
    else:
        results = [worker(task) for task in tqdm(tasks, **bar)]

    warnings = []
    saturated = sum(1 for _, minutes_saturated in results if minutes_saturated)
    if saturated:
        warnings.append(f"{saturated} of {len(tasks)} scenarios saturated the origin")
        logger.warning(warnings[-1])
    grids = np.stack([values for values, _ in results])
    return ScenarioSet(list(params), grids, start_minute, shape, warnings)


def impute(obs, best):
    """Missing patches of obs take best's value; present patches stay as they are."""
    if obs.values.shape != best.values.shape:
        raise ValueError(f"observation grid {obs.values.shape} and MAP grid {best.values.shape} differ in shape")
    out = obs.copy()
    out.values[obs.missing] = best.values[obs.missing]
    return out


def inflow_from_counters(counters, origin_km=0.0):
    """Inflow boundary from the counter at the road origin."""
    if counters is None or counters.empty:
        raise ValueError("no counter data for the inflow boundary")
    origin = counters[np.isclose(counters['position_km'].to_numpy(dtype=float), origin_km)]
    if origin.empty:
        raise ValueError(f"no counter at {origin_km} km to drive the inflow")
    return InflowSchedule.from_frame(origin)


def demand_ramp(minutes, base_vpm, peak_vpm, ramp_minutes, speed_kmh, first_minute=0):
    """Linear rise from base_vpm to peak_vpm over ramp_minutes, then held."""
    records = []
    for m in range(minutes):
        share = min(1.0, m / ramp_minutes)
        count = int(round(base_vpm + (peak_vpm - base_vpm) * share))
        records.append(InflowRecord(first_minute + m, count, speed_kmh))
    return InflowSchedule.from_records(records)


def virtual_counters(log, road, inflow):
    """
    Counter readings from a simulated run.

    The origin counter repeats the inflow. Every other counter reports per
    minute the vehicles crossing its cell and the mean speed of the samples
    in that cell; minutes without samples carry no speed.
    """
    T = log.minutes
    minutes = np.arange(T) + log.first_minute
    frames = []
    origin = inflow.to_frame()
    origin = origin[(origin['minute'] >= log.first_minute) & (origin['minute'] < log.first_minute + T)]
    frames.append(pd.DataFrame({
        'minute': origin['minute'].to_numpy(),
        'position_km': 0.0,
        'count': origin['count'].to_numpy(),
        'speed_kmh': np.where(origin['count'].to_numpy() > 0, origin['speed_kmh'].to_numpy(), np.nan),
    }))

    order = np.lexsort((log.step, log.vehicle))
    vehicle, step, cell = log.vehicle[order], log.step[order], log.cell[order]
    minute_of = step // STEPS_PER_MINUTE
    new_vehicle = np.ones(vehicle.size, dtype=bool)
    new_vehicle[1:] = vehicle[1:] != vehicle[:-1]

    for km in road.counter_positions_km:
        if np.isclose(km, 0.0):
            continue
        c = road.km_to_cell(km)
        beyond = cell >= c
        was_beyond = np.zeros(vehicle.size, dtype=bool)
        was_beyond[1:] = beyond[:-1]
        crossed = beyond & (new_vehicle | ~was_beyond)
        count = np.bincount(minute_of[crossed], minlength=T)[:T]

        at = log.cell == c
        hits = np.bincount(log.step[at] // STEPS_PER_MINUTE, minlength=T)[:T]
        sums = np.bincount(log.step[at] // STEPS_PER_MINUTE,
                           weights=cells_to_kmh(log.velocity[at].astype(float)), minlength=T)[:T]
        speed = np.full(T, np.nan)
        speed[hits > 0] = sums[hits > 0] / hits[hits > 0]
        frames.append(pd.DataFrame({'minute': minutes, 'position_km': km, 'count': count, 'speed_kmh': speed}))

    counters = pd.concat(frames, ignore_index=True)
    return counters.sort_values(['minute', 'position_km'], kind='stable').reset_index(drop=True)


def synth_twin(road, theta, demand, mask, seed, warmup=WARMUP_MINUTES, grid=None):
    """
    Synthetic ground truth, masked observations and virtual counters.

    The truth run covers the whole demand schedule; the first `warmup`
    minutes are dropped from truth and observations but kept in the counters
    so a pipeline run can warm up on them.
    """
    if grid is not None and not grid.contains(theta):
        raise ValueError(f"{theta} is not on the scenario lattice")
    start = demand.first_minute
    if start is None or demand.minutes <= warmup:
        raise ValueError(f"demand covers {demand.minutes} minute(s); need more than the {warmup} warm-up minutes")

    log = run_scenario(road, theta, demand, demand.minutes, derive_seed(seed, 'truth'), first_minute=start)
    truth_full = densify(aggregate(log, road), road)
    truth = truth_full.window(start + warmup, start + demand.minutes)
    observed = mask_synthetic(truth, mask, derive_seed(seed, 'mask'))
    counters = virtual_counters(log, road, demand)

    congested = truth.values < mask.threshold_kmh
    if congested.any():
        share = float(observed.missing[congested].mean())
        logger.info(f"Twin: {int(congested.sum())} patches below {mask.threshold_kmh} km/h, {share:.0%} masked")
    return TwinData(truth, observed, counters, demand, log.saturation_minutes)


def _mean_error(error, selected):
    return float(error[selected].mean()) if selected.any() else float('nan')


def evaluate_mae(imputed, reference, observed):
    """
    MAE of imputed velocities against a reference.

    Args:
        imputed: Imputed PatchGrid
        reference: PatchGrid covering the imputed minutes; NaN patches are not scored
        observed: The observation grid before imputation (defines the missing set)

    Returns:
        EvalReport; a side with no patches reports NaN
    """
    if imputed.values.shape != observed.values.shape:
        raise ValueError("imputed and observed grids differ in shape")
    if reference.segments != imputed.segments:
        raise ValueError(f"reference has {reference.segments} segments, imputed {imputed.segments}")
    lo = max(reference.first_minute, imputed.first_minute)
    hi = min(reference.first_minute + reference.minutes, imputed.first_minute + imputed.minutes)
    if lo >= hi:
        raise ValueError("empty evaluation set: reference and imputed minutes do not overlap")

    ref = reference.window(lo, hi).values
    imp = imputed.window(lo, hi).values
    was_missing = observed.window(lo, hi).missing
    scored = ~np.isnan(ref) & ~np.isnan(imp)
    on_missing = scored & was_missing
    on_observed = scored & ~was_missing
    if not on_missing.any() and not on_observed.any():
        raise ValueError("empty evaluation set: no patch has both a reference and an imputed value")

    error = np.abs(imp - ref)
    return EvalReport(
        _mean_error(error, on_missing), _mean_error(error, on_observed),
        int(on_missing.sum()), int(on_observed.sum()),
    )


def reference_from_counters(counters, road, position_km, like):
    """Reference grid holding one counter's speeds in its segment, NaN elsewhere."""
    rows = counters[np.isclose(counters['position_km'].to_numpy(dtype=float), position_km)]
    if rows.empty:
        raise ValueError(f"no counter readings at {position_km} km")
    if like.segments != road.segments:
        raise ValueError(f"grid has {like.segments} segments, road has {road.segments}")
    reference = PatchGrid.empty(like.segments, like.minutes, like.first_minute)
    seg = counter_segment(position_km, road.segments)
    cols = rows['minute'].to_numpy(dtype=np.int64) - like.first_minute
    keep = (cols >= 0) & (cols < like.minutes)
    reference.values[seg, cols[keep]] = rows['speed_kmh'].to_numpy(dtype=float)[keep]
    return reference


def _posterior_rows(minute, ens, scenarios, best):
    rows = [
        {'minute': minute, **dict(zip(PARAMETER_NAMES, scenarios.params[i].as_tuple())),
         'particle_count': int(ens.counts[i]), 'kind': 'particle'}
        for i in np.flatnonzero(ens.counts)
    ]
    rows.append({'minute': minute, **dict(zip(PARAMETER_NAMES, scenarios.params[best].as_tuple())),
                 'particle_count': int(ens.counts[best]), 'kind': 'map'})
    return rows


def _marginal_rows(minute, ens, scenarios):
    rows = []
    table = np.array([p.as_tuple() for p in scenarios.params])
    for d, name in enumerate(PARAMETER_NAMES):
        levels, share = ens.marginal(table[:, d])
        rows.extend({'minute': minute, 'parameter': name, 'value': float(v), 'probability': float(s)}
                    for v, s in zip(levels, share))
    return rows


def _window_warmup(lo, warmup, inflow_start):
    """Warm-up for a window starting at minute lo, clipped to the inflow history."""
    return min(warmup, max(0, lo - inflow_start))


def run_pipeline(obs, counters, cfg):
    """
    Sliding-window imputation of an observation stream.

    Every window gets its own ensemble: each scenario starts on an empty road
    `warmup` minutes before the window and runs to the window's last minute,
    with scenario i seeded by derive_seed(derive_seed(cfg.seed, 'ensemble'), i).
    The particle ensemble carries over from one window to the next.

    Args:
        obs: PatchGrid of the whole stream (columns are consecutive minutes)
        counters: Counter frame (minute, position_km, count, speed_kmh); the 0 km
                  counter supplies the inflow for warm-up and stream minutes
        cfg: PipelineConfig

    Returns:
        PipelineResult
    """
    road = cfg.road
    if obs.segments != road.segments:
        raise ValueError(f"observations have {obs.segments} segments, road has {road.segments}")
    if obs.minutes < cfg.window:
        raise ValueError(f"stream has {obs.minutes} minute(s), window needs {cfg.window}")
    present = obs.values[obs.present]
    if (present <= 0).any():
        raise ValueError("observed velocities must be > 0 km/h")

    warnings = []
    inflow = inflow_from_counters(counters)
    start = obs.first_minute
    first_warmup = _window_warmup(start, cfg.warmup, inflow.first_minute)
    missing = inflow.missing_minutes(start - first_warmup, start + obs.minutes)
    if missing:
        raise ValueError(f"inflow counter has no record for minute(s) {missing[:5]}")

    ends = list(range(cfg.window - 1, obs.minutes, cfg.cadence))
    clipped = sum(1 for end in ends
                  if _window_warmup(start + end - cfg.window + 1, cfg.warmup, inflow.first_minute) < cfg.warmup)
    if clipped:
        warnings.append(f"warm-up clipped to {first_warmup} minute(s) for the window starting at minute {start} "
                        f"({clipped} window(s) clipped): counters start at minute {inflow.first_minute}")
        logger.warning(warnings[-1])

    params = build_scenario_grid(cfg.grid)
    ensemble_seed = derive_seed(cfg.seed, 'ensemble')
    logger.info(f"{len(params)} scenarios, {len(ends)} window(s) of {cfg.window} + {cfg.warmup} minutes")

    ens = ParticleEnsemble.uniform(len(params), cfg.particles)
    imputed = obs.copy()
    map_grid = PatchGrid.empty(obs.segments, obs.minutes, start)
    trace, posterior_rows, marginal_rows = [], [], []
    degraded = 0
    saturated_windows = 0

    for end in ends:
        lo, hi = start + end - cfg.window + 1, start + end + 1
        scenarios = simulate_ensemble(params, road, inflow, lo, cfg.window,
                                      _window_warmup(lo, cfg.warmup, inflow.first_minute),
                                      seed=ensemble_seed, workers=cfg.workers,
                                      shape=cfg.grid.shape, progress=cfg.progress)
        saturated_windows += bool(scenarios.warnings)

        window = obs.window(lo, hi)
        classes = classify(window, road, counters)
        degraded += classes.degraded

        if window.present.any():
            priors = build_priors(classes, interpolate_bounds(window))
            post = assimilate_window(window, classes, priors, scenarios, ens,
                                     derive_seed(cfg.seed, 'filter', end), cfg.likelihood, cfg.rejuvenation)
            ens = post.ensemble
            if post.ess:
                logger.info(f"minute {hi - 1}: ESS {post.ess[-1]:.1f}, MAP {post.map_params}")
        else:
            warnings.append(f"window ending at minute {hi - 1} has no observation; filter not updated")
            logger.warning(warnings[-1])

        best = map_index(ens, scenarios)
        simulated = scenarios.grid(best)
        imputed.values[:, lo - start:hi - start] = impute(window, simulated).values
        map_grid.values[:, lo - start:hi - start] = simulated.values
        trace.append(MapEntry(hi - 1, scenarios.params[best], int(ens.counts[best])))
        posterior_rows.extend(_posterior_rows(hi - 1, ens, scenarios, best))
        marginal_rows.extend(_marginal_rows(hi - 1, ens, scenarios))

    if saturated_windows:
        warnings.append(f"origin saturated in {saturated_windows} of {len(ends)} window ensemble(s)")
    if degraded:
        warnings.append(f"{degraded} missing patch-window(s) on counter segments had no counter reading")

    return PipelineResult(
        imputed=imputed,
        imputed_mask=obs.missing,
        map_trace=trace,
        posterior=pd.DataFrame(posterior_rows, columns=['minute', *PARAMETER_NAMES, 'particle_count', 'kind']),
        marginals=pd.DataFrame(marginal_rows, columns=['minute', 'parameter', 'value', 'probability']),
        map_grid=map_grid,
        warnings=warnings,
    )
