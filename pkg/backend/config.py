import configparser
import os
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from dotenv import load_dotenv
from pydantic import BaseModel, Field, field_validator, model_validator

# Load environment variables from .env file
load_dotenv()

# --- Runtime knobs (environment) ---
# SNFS_WORKERS: processes used for ensemble simulation (1 = run in-process)
# SNFS_SEED: base seed used when a config file has no [pipeline] seed
# SNFS_LOG_LEVEL: default level for the CLI's stderr logger
WORKERS = int(os.environ.get("SNFS_WORKERS", os.cpu_count() or 1))
DEFAULT_SEED = int(os.environ.get("SNFS_SEED", "20240901"))
LOG_LEVEL = os.environ.get("SNFS_LOG_LEVEL", "WARNING")

# --- Cell automaton resolution ---
CELL_LENGTH_M = 10
STEP_SECONDS = 1.8
# One cell per step is 10 m / 1.8 s = 20 km/h
VELOCITY_RESOLUTION_KMH = 20
# 33 x 1.8 s = 59.4 s per aggregation minute
STEPS_PER_MINUTE = 33

# Lateral move probability once a faster adjacent lane is found
LANE_CHANGE_PROBABILITY = 0.10

# Backlog at the origin larger than this multiple of the minute's count is saturation
SATURATION_FACTOR = 10

# --- Patch grid ---
SEGMENT_LENGTH_M = 500
SEGMENT_CELLS = SEGMENT_LENGTH_M // CELL_LENGTH_M

# --- Priors and likelihood ---
SIGMA_P_PERCENT = 20.0
SIGMA_A_KMH = 10.0
U_MIN_KMH = 1.0
# Class 2 prior is flat below this speed and ramps down above it
CLASS2_BREAKPOINT_KMH = 20.0
QUADRATURE_NODES = 257
# Class 1 normalisation below this mass falls back to a uniform prior
MIN_TRUNCATED_MASS = 1e-12
LOGLIK_FLOOR = 1e-6

# --- Particle filter ---
REJUVENATION_PROBABILITY = 0.1

# --- Pipeline ---
WINDOW_MINUTES = 30
CADENCE_MINUTES = 1
WARMUP_MINUTES = 10

# --- Scenario lattices: (lower, upper, increment) per parameter ---
FULL_GRID = {
    'p_bn': (0.26, 0.54, 0.02),   # 15
    'p': (0.06, 0.24, 0.03),      # 7
    'q': (0.06, 0.24, 0.03),      # 7
    'r': (0.90, 0.99, 0.01),      # 10
}

# 5 x 3 x 3 x 4 = 180 scenarios spanning the same ranges
CI_GRID = {
    'p_bn': (0.26, 0.54, 0.07),
    'p': (0.06, 0.24, 0.09),
    'q': (0.06, 0.24, 0.09),
    'r': (0.90, 0.99, 0.03),
}

GRID_PRESETS = {
    'full': FULL_GRID,
    'ci': CI_GRID,
}

# --- Road presets ---
# The fast lane is the rightmost lane (lane 0). The 0 km counter drives the inflow.
ROAD_PRESETS = {
    'ken_o': {
        'length_km': 10.0,
        'lanes': 2,
        'fast_limit_kmh': 100.0,
        'slow_limit_kmh': 80.0,
        'bottleneck_start_km': 8.6,
        'bottleneck_end_km': 9.8,
        'counters_km': [0.0, 2.27, 3.86, 5.89, 9.63],
    },
    'tomei': {
        'length_km': 14.0,
        'lanes': 3,
        'fast_limit_kmh': 120.0,
        'slow_limit_kmh': 100.0,
        'bottleneck_start_km': 10.7,
        'bottleneck_end_km': 12.2,
        'counters_km': [0.0, 1.8, 3.46, 5.66, 7.86, 10.84],
    },
}


def derive_seed(base, *keys):
    """
    Derive an independent, reproducible seed from the run's base seed.

    Args:
        base: Base seed (the config's single `seed` key)
        *keys: Non-negative integers or strings naming the consumer
               (e.g. derive_seed(seed, 'scenario', 17))

    Returns:
        int: 63-bit seed suitable for numpy.random.default_rng
    """
    spawn_key = tuple(
        k if isinstance(k, (int, np.integer)) else int.from_bytes(str(k).encode(), 'little') % (2**32)
        for k in keys
    )
    state = np.random.SeedSequence(int(base), spawn_key=spawn_key).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


# --- Validation ---
def validate_config():
    """Validates module-level constants and environment knobs."""
    errors = []

    if abs(CELL_LENGTH_M / STEP_SECONDS * 3.6 - VELOCITY_RESOLUTION_KMH) > 1e-9:
        errors.append(
            f"VELOCITY_RESOLUTION_KMH ({VELOCITY_RESOLUTION_KMH}) must equal "
            f"CELL_LENGTH_M / STEP_SECONDS in km/h ({CELL_LENGTH_M / STEP_SECONDS * 3.6:.3f})"
        )

    if STEPS_PER_MINUTE * STEP_SECONDS > 60:
        errors.append(f"STEPS_PER_MINUTE ({STEPS_PER_MINUTE}) x STEP_SECONDS exceeds one minute")

    if SEGMENT_CELLS * CELL_LENGTH_M != SEGMENT_LENGTH_M:
        errors.append(f"SEGMENT_LENGTH_M ({SEGMENT_LENGTH_M}) must be a whole number of cells")

    if not (0 < LANE_CHANGE_PROBABILITY <= 1):
        errors.append(f"LANE_CHANGE_PROBABILITY must be in (0, 1], got {LANE_CHANGE_PROBABILITY}")

    if not (0 <= REJUVENATION_PROBABILITY < 1):
        errors.append(f"REJUVENATION_PROBABILITY must be in [0, 1), got {REJUVENATION_PROBABILITY}")

    if QUADRATURE_NODES < 3:
        errors.append(f"QUADRATURE_NODES must be >= 3, got {QUADRATURE_NODES}")

    if SIGMA_P_PERCENT <= 0 or SIGMA_A_KMH <= 0:
        errors.append("SIGMA_P_PERCENT and SIGMA_A_KMH must be positive")

    if not (0 < U_MIN_KMH < CLASS2_BREAKPOINT_KMH):
        errors.append(f"U_MIN_KMH ({U_MIN_KMH}) must lie in (0, {CLASS2_BREAKPOINT_KMH})")

    if WORKERS < 1:
        errors.append(f"SNFS_WORKERS must be >= 1, got {WORKERS}")

    if errors:
        raise ValueError("Configuration validation failed:\n" + "\n".join(f"  - {e}" for e in errors))

    return True


# --- INI run configuration ---

def _split_list(value):
    if isinstance(value, str):
        return [item.strip() for item in value.split(',') if item.strip()]
    return value


class RoadSection(BaseModel):
    """[road] section: geometry in km, limits in km/h."""
    length_km: float = Field(gt=0)
    lanes: int = Field(ge=1)
    fast_limit_kmh: float = Field(ge=VELOCITY_RESOLUTION_KMH / 2)
    slow_limit_kmh: float = Field(ge=VELOCITY_RESOLUTION_KMH / 2)
    bottleneck_start_km: float = Field(ge=0)
    bottleneck_end_km: float = Field(gt=0)
    counters_km: List[float] = Field(default_factory=list)

    @field_validator('counters_km', mode='before')
    @classmethod
    def split_counters(cls, value):
        return _split_list(value)

    @model_validator(mode='after')
    def check_extent(self):
        cells = self.length_km * 1000 / CELL_LENGTH_M
        if abs(cells / SEGMENT_CELLS - round(cells / SEGMENT_CELLS)) > 1e-6:
            raise ValueError(f"length_km ({self.length_km}) must be a multiple of {SEGMENT_LENGTH_M / 1000} km")
        if not (self.bottleneck_start_km < self.bottleneck_end_km <= self.length_km):
            raise ValueError(
                f"bottleneck {self.bottleneck_start_km}-{self.bottleneck_end_km} km must be a "
                f"non-empty span inside the {self.length_km} km road"
            )
        for km in self.counters_km:
            if not (0 <= km <= self.length_km):
                raise ValueError(f"counter at {km} km lies outside the road")
        return self

    def to_road(self):
        """Build the simulator's RoadConfig (cells, cells per step)."""
        from snfs import RoadConfig
        return RoadConfig.from_km(
            length_km=self.length_km,
            lanes=self.lanes,
            fast_limit_kmh=self.fast_limit_kmh,
            slow_limit_kmh=self.slow_limit_kmh,
            bottleneck_km=(self.bottleneck_start_km, self.bottleneck_end_km),
            counters_km=self.counters_km,
        )


class GridSection(BaseModel):
    """[grid] section: lower, upper, step triples per parameter."""
    p_bn: Tuple[float, float, float] = FULL_GRID['p_bn']
    p: Tuple[float, float, float] = FULL_GRID['p']
    q: Tuple[float, float, float] = FULL_GRID['q']
    r: Tuple[float, float, float] = FULL_GRID['r']

    @field_validator('p_bn', 'p', 'q', 'r', mode='before')
    @classmethod
    def split_triples(cls, value):
        return _split_list(value)

    @classmethod
    def preset(cls, name):
        if name not in GRID_PRESETS:
            raise ValueError(f"Unknown grid preset: {name}. Use {', '.join(GRID_PRESETS)}")
        return cls(**GRID_PRESETS[name])

    def to_grid_spec(self):
        from imputation import GridSpec
        return GridSpec(p_bn=self.p_bn, p=self.p, q=self.q, r=self.r)


class PipelineSection(BaseModel):
    """[pipeline] section."""
    window: int = Field(default=WINDOW_MINUTES, ge=1)
    warmup: int = Field(default=WARMUP_MINUTES, ge=0)
    cadence: int = Field(default=CADENCE_MINUTES, ge=1)
    seed: int = Field(default=DEFAULT_SEED, ge=0)
    particles: Optional[int] = Field(default=None, ge=1)
    workers: int = Field(default=WORKERS, ge=1)


class DemandSection(BaseModel):
    """[demand] section: origin inflow ramp for runs without a counters file."""
    minutes: int = Field(default=60, ge=1)
    base_vpm: float = Field(default=20.0, ge=0)
    peak_vpm: float = Field(default=50.0, ge=0)
    ramp_minutes: int = Field(default=20, ge=1)
    speed_kmh: float = Field(default=80.0, gt=0)

    def to_schedule(self, warmup=0):
        """InflowSchedule over warmup + minutes, starting at minute 0."""
        from imputation import demand_ramp
        return demand_ramp(warmup + self.minutes, self.base_vpm, self.peak_vpm, self.ramp_minutes, self.speed_kmh)


class TwinSection(DemandSection):
    """[twin] section: truth parameters, demand ramp and masking."""
    theta: Tuple[float, float, float, float]
    threshold_kmh: float = Field(default=CLASS2_BREAKPOINT_KMH + 10, gt=0)
    mask_prob_below: float = Field(default=0.6, ge=0, le=1)
    mask_prob_above: float = Field(default=0.02, ge=0, le=1)
    noise_sigma_kmh: float = Field(default=3.0, ge=0)

    @field_validator('theta', mode='before')
    @classmethod
    def split_theta(cls, value):
        return _split_list(value)

    @field_validator('theta')
    @classmethod
    def check_probabilities(cls, value):
        if any(not (0 <= v <= 1) for v in value):
            raise ValueError(f"theta values must be probabilities, got {value}")
        return value

    def to_mask_spec(self):
        from velocity_field import MaskSpec
        return MaskSpec(
            threshold_kmh=self.threshold_kmh,
            mask_prob_below=self.mask_prob_below,
            mask_prob_above=self.mask_prob_above,
            noise_sigma_kmh=self.noise_sigma_kmh,
        )


class RunConfig(BaseModel):
    """Parsed INI file: [road], [grid], [pipeline], [demand] and optional [twin]."""
    road: RoadSection
    grid: GridSection = Field(default_factory=GridSection)
    pipeline: PipelineSection = Field(default_factory=PipelineSection)
    demand: DemandSection = Field(default_factory=DemandSection)
    twin: Optional[TwinSection] = None

    def pipeline_config(self, grid_preset=None, seed=None, workers=None, progress=False):
        """Build the imputation pipeline's config, applying CLI overrides."""
        from imputation import PipelineConfig
        grid = GridSection.preset(grid_preset) if grid_preset else self.grid
        return PipelineConfig(
            road=self.road.to_road(),
            grid=grid.to_grid_spec(),
            window=self.pipeline.window,
            cadence=self.pipeline.cadence,
            warmup=self.pipeline.warmup,
            seed=self.pipeline.seed if seed is None else seed,
            particles=self.pipeline.particles,
            workers=self.pipeline.workers if workers is None else workers,
            progress=progress,
        )


def load_run_config(path):
    """
    Load an INI run configuration.

    `[road] preset = ken_o` pulls a road preset, `[grid] preset = ci` a grid preset;
    explicit keys in the same section override preset values.

    Raises:
        FileNotFoundError: the file does not exist
        ValueError: unknown section/preset or values failing validation
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")

    parser = configparser.ConfigParser(inline_comment_prefixes=('#', ';'))
    try:
        parser.read(path, encoding='utf-8')
    except configparser.Error as e:
        raise ValueError(f"{path}: {e}") from e

    known = {'road', 'grid', 'pipeline', 'demand', 'twin'}
    unknown = [s for s in parser.sections() if s not in known]
    if unknown:
        raise ValueError(f"{path}: unknown section(s): {', '.join(unknown)}")
    if not parser.has_section('road'):
        raise ValueError(f"{path}: missing [road] section")

    sections = {}
    for name in parser.sections():
        values = dict(parser.items(name))
        preset = values.pop('preset', None)
        if preset is not None:
            presets = ROAD_PRESETS if name == 'road' else GRID_PRESETS if name == 'grid' else None
            if presets is None or preset not in presets:
                raise ValueError(f"{path}: unknown preset '{preset}' in [{name}]")
            values = {**presets[preset], **values}
        sections[name] = values

    try:
        return RunConfig(**sections)
    except ValueError as e:
        raise ValueError(f"{path}: {e}") from e
