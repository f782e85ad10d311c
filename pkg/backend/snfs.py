"""
Stochastic Nishinari-Fukui-Schadschneider (S-NFS) cellular automaton.

Multi-lane open road with a bottleneck span, origin inflow and probabilistic
lane changes. Space is 10 m cells, time is 1.8 s steps, velocity is cells per
step (1 cell/step = 20 km/h). Lanes are indexed right to left, lane 0 being the
fast lane.
"""
import logging
from collections import deque
from dataclasses import dataclass, field
from operator import attrgetter
from typing import Deque, Dict, List, Tuple

import numpy as np
import pandas as pd

from config import (
    CELL_LENGTH_M,
    LANE_CHANGE_PROBABILITY,
    SATURATION_FACTOR,
    SEGMENT_CELLS,
    STEP_SECONDS,
    STEPS_PER_MINUTE,
    VELOCITY_RESOLUTION_KMH,
)

logger = logging.getLogger(__name__)

# Gap to a vehicle that does not exist
INF_GAP = 10**9


def kmh_to_cells(v_kmh):
    """Round km/h to the nearest cells/step (halves round up)."""
    if v_kmh < 0:
        raise ValueError(f"velocity must be >= 0 km/h, got {v_kmh}")
    return int(np.floor(v_kmh / VELOCITY_RESOLUTION_KMH + 0.5))


def cells_to_kmh(c):
    """Cells/step to km/h. Works on scalars and numpy arrays."""
    return c * VELOCITY_RESOLUTION_KMH


@dataclass(frozen=True, order=True)
class ModelParams:
    """One S-NFS scenario. Field order defines the lexicographic tie-break."""
    p_bn: float
    p: float
    q: float
    r: float

    def __post_init__(self):
        for name in ('p_bn', 'p', 'q', 'r'):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"{name} must be a probability in [0, 1], got {value}")

    @classmethod
    def from_sequence(cls, values):
        values = [float(v) for v in values]
        if len(values) != 4:
            raise ValueError(f"expected 4 values (p_bn, p, q, r), got {len(values)}")
        return cls(*values)

    def as_tuple(self):
        return (self.p_bn, self.p, self.q, self.r)

    def __str__(self):
        return f"p_bn={self.p_bn:.2f} p={self.p:.2f} q={self.q:.2f} r={self.r:.2f}"


@dataclass(frozen=True)
class RoadConfig:
    """Road geometry in cells. bottleneck_span is [start, end) in cells."""
    length_cells: int
    lanes: int
    speed_limit_per_lane: Tuple[int, ...]
    bottleneck_span: Tuple[int, int]
    counter_positions_km: Tuple[float, ...] = ()
    cell_length_m: float = CELL_LENGTH_M
    step_seconds: float = STEP_SECONDS

    def __post_init__(self):
        if self.length_cells < 1:
            raise ValueError(f"length_cells must be >= 1, got {self.length_cells}")
        if self.lanes < 1:
            raise ValueError(f"lanes must be >= 1, got {self.lanes}")
        if len(self.speed_limit_per_lane) != self.lanes:
            raise ValueError(
                f"speed_limit_per_lane has {len(self.speed_limit_per_lane)} entries for {self.lanes} lanes"
            )
        if any(v < 1 for v in self.speed_limit_per_lane):
            raise ValueError(f"speed limits must be >= 1 cell/step, got {self.speed_limit_per_lane}")
        start, end = self.bottleneck_span
        if not (0 <= start < end <= self.length_cells):
            raise ValueError(f"bottleneck span {self.bottleneck_span} must lie inside [0, {self.length_cells}]")

    @classmethod
    def from_km(cls, length_km, lanes, fast_limit_kmh, slow_limit_kmh, bottleneck_km, counters_km=()):
        """Lane 0 gets the fast limit, all other lanes the slow one."""
        to_cells = lambda km: int(round(km * 1000 / CELL_LENGTH_M))
        limits = tuple(
            kmh_to_cells(fast_limit_kmh if lane == 0 else slow_limit_kmh) for lane in range(lanes)
        )
        return cls(
            length_cells=to_cells(length_km),
            lanes=lanes,
            speed_limit_per_lane=limits,
            bottleneck_span=(to_cells(bottleneck_km[0]), to_cells(bottleneck_km[1])),
            counter_positions_km=tuple(float(km) for km in counters_km),
        )

    @property
    def length_km(self):
        return self.length_cells * self.cell_length_m / 1000

    @property
    def segments(self):
        return self.length_cells // SEGMENT_CELLS

    @property
    def mean_limit_kmh(self):
        return float(cells_to_kmh(np.mean(self.speed_limit_per_lane)))

    def km_to_cell(self, km):
        """Cell containing position km; the downstream end maps to the last cell."""
        return min(int(km * 1000 // self.cell_length_m), self.length_cells - 1)


def _no_vehicles():
    return np.zeros(0, dtype=np.int64)


@dataclass(eq=False)
class Lane:
    """Vehicles of one lane as parallel int arrays, sorted by ascending cell."""
    cell: np.ndarray = field(default_factory=_no_vehicles)
    prev_cell: np.ndarray = field(default_factory=_no_vehicles)
    velocity: np.ndarray = field(default_factory=_no_vehicles)
    vid: np.ndarray = field(default_factory=_no_vehicles)

    def __len__(self):
        return int(self.cell.size)

    def insert(self, cell, velocity, vid, prev_cell=None):
        """Place a vehicle at its sorted position and return that index."""
        pos = int(np.searchsorted(self.cell, cell))
        if pos < len(self) and self.cell[pos] == cell:
            raise ValueError(f"cell {cell} is already occupied")
        self.cell = np.insert(self.cell, pos, cell)
        self.prev_cell = np.insert(self.prev_cell, pos, cell if prev_cell is None else prev_cell)
        self.velocity = np.insert(self.velocity, pos, velocity)
        self.vid = np.insert(self.vid, pos, vid)
        return pos

    def pop(self, pos):
        """Remove the vehicle at index pos; returns (cell, velocity, vid, prev_cell)."""
        out = (int(self.cell[pos]), int(self.velocity[pos]), int(self.vid[pos]), int(self.prev_cell[pos]))
        self.cell = np.delete(self.cell, pos)
        self.prev_cell = np.delete(self.prev_cell, pos)
        self.velocity = np.delete(self.velocity, pos)
        self.vid = np.delete(self.vid, pos)
        return out

    def truncate(self, n):
        """Keep the n rearmost vehicles; returns the vids dropped, frontmost first."""
        gone = self.vid[n:][::-1].copy()
        self.cell, self.prev_cell = self.cell[:n], self.prev_cell[:n]
        self.velocity, self.vid = self.velocity[:n], self.vid[:n]
        return gone


@dataclass
class Arrival:
    due_step: int
    speed_kmh: float


@dataclass
class SimState:
    """Mutable simulator state: one Lane per lane index."""
    lanes: List[Lane]
    rng: np.random.Generator
    time_step: int = 0
    pending: Deque[Arrival] = field(default_factory=deque)
    exit_log: List[Tuple[int, int]] = field(default_factory=list)
    next_vid: int = 0
    injected: int = 0
    minute_count: int = 0
    saturation_minutes: List[int] = field(default_factory=list)

    @classmethod
    def new(cls, road, seed):
        return cls(lanes=[Lane() for _ in range(road.lanes)], rng=np.random.default_rng(seed))

    @property
    def vehicles_present(self):
        return sum(len(lane) for lane in self.lanes)

    def place(self, lane, cell, velocity, prev_cell=None):
        """Add a new vehicle; returns its vid."""
        vid = self.next_vid
        self.lanes[lane].insert(cell, velocity, vid, prev_cell)
        self.next_vid += 1
        self.injected += 1
        return vid

    def lane_of(self, vid):
        for idx, lane in enumerate(self.lanes):
            if (lane.vid == vid).any():
                return idx
        return None

    def snapshot(self):
        """(lane, cell, velocity, vid) arrays over all vehicles, lane by lane."""
        lane_idx = np.concatenate([np.full(len(lane), idx, dtype=np.int64) for idx, lane in enumerate(self.lanes)])
        return (
            lane_idx,
            np.concatenate([lane.cell for lane in self.lanes]),
            np.concatenate([lane.velocity for lane in self.lanes]),
            np.concatenate([lane.vid for lane in self.lanes]),
        )


@dataclass(frozen=True)
class InflowRecord:
    minute: int
    count: int
    speed_kmh: float

    def __post_init__(self):
        if self.count < 0:
            raise ValueError(f"minute {self.minute}: inflow count must be >= 0, got {self.count}")
        if self.count > 0 and not (self.speed_kmh > 0):
            raise ValueError(f"minute {self.minute}: inflow speed must be > 0 km/h, got {self.speed_kmh}")


@dataclass
class InflowSchedule:
    """Per-minute vehicle arrivals at the origin, keyed by absolute minute."""
    records: Dict[int, InflowRecord] = field(default_factory=dict)

    @classmethod
    def from_records(cls, records):
        schedule = cls()
        for rec in records:
            if rec.minute in schedule.records:
                raise ValueError(f"duplicate inflow record for minute {rec.minute}")
            schedule.records[rec.minute] = rec
        return schedule

    @classmethod
    def from_frame(cls, df):
        """Build from a frame with minute, count and speed_kmh columns."""
        records = []
        for minute, count, speed in zip(df['minute'], df['count'], df['speed_kmh']):
            speed = 0.0 if pd.isna(speed) else float(speed)
            records.append(InflowRecord(minute=int(minute), count=int(count), speed_kmh=speed))
        return cls.from_records(records)

    def to_frame(self):
        rows = [(r.minute, r.count, r.speed_kmh) for r in sorted(self.records.values(), key=attrgetter('minute'))]
        return pd.DataFrame(rows, columns=['minute', 'count', 'speed_kmh'])

    @property
    def first_minute(self):
        return min(self.records) if self.records else None

    @property
    def minutes(self):
        return len(self.records)

    def missing_minutes(self, start, stop):
        return [m for m in range(start, stop) if m not in self.records]

    def record(self, minute):
        return self.records[minute]


@dataclass
class SampleLog:
    """
    Per-step vehicle samples. Each row is the vehicle's cell after the move and
    the velocity it moved with, tagged with the step index counted from the
    start of the run.
    """
    step: np.ndarray
    lane: np.ndarray
    cell: np.ndarray
    velocity: np.ndarray
    vehicle: np.ndarray
    total_steps: int
    first_minute: int = 0
    injected: int = 0
    exited: int = 0
    saturation_minutes: List[int] = field(default_factory=list)

    @classmethod
    def empty(cls, total_steps=0, first_minute=0):
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy(), z.copy(), z.copy(), total_steps, first_minute)

    @property
    def minutes(self):
        return self.total_steps // STEPS_PER_MINUTE

    def __len__(self):
        return int(self.step.size)




def _gaps(cells, s):
    """G(t, s) for every vehicle: cells to the s-th vehicle ahead minus s."""
    gaps = np.full(cells.size, INF_GAP, dtype=np.int64)
    if cells.size > s:
        gaps[:-s] = cells[s:] - cells[:-s] - s
    return gaps


def step(state, road, params):
    """
    Advance every lane by one step (rules R0-R5).

    Per lane, three uniform vectors are drawn in front-to-back order: the s
    choice, then the braking draw, then the slow-to-start draw. R1-R4 act on
    the whole lane at once with positions fixed; R5 bounds each vehicle by its
    leader's new position, resolved front to back as a running minimum.
    """
    rng = state.rng
    bn_start, bn_end = road.bottleneck_span

    for lane_idx, lane in enumerate(state.lanes):
        n = len(lane)
        if n == 0:
            continue
        vmax = road.speed_limit_per_lane[lane_idx]
        # draws are indexed front to back, lane arrays rear to front
        quick = (rng.random(n) < params.r)[::-1]
        brake_draw = rng.random(n)[::-1]
        slow_draw = rng.random(n)[::-1]

        cell = lane.cell
        v = np.minimum(vmax, lane.velocity + 1)                                    # R1
        previous = np.maximum(0, np.where(quick, _gaps(lane.prev_cell, 2), _gaps(lane.prev_cell, 1)))
        v = np.where(slow_draw < params.q, np.minimum(v, previous), v)             # R2
        v = np.minimum(v, np.where(quick, _gaps(cell, 2), _gaps(cell, 1)))         # R3
        p_eff = np.where((cell >= bn_start) & (cell < bn_end), params.p_bn, params.p)
        v = np.where((brake_draw < p_eff) & (v >= 1), v - 1, v)                    # R4
        # R5: target cells strictly below the leader's, front to back
        rank = np.arange(n)
        bound = np.minimum.accumulate((cell + v - rank)[::-1])[::-1] + rank
        v = bound - cell

        lane.prev_cell = cell
        lane.cell = cell + v
        lane.velocity = v

        exiting = int(np.searchsorted(lane.cell, road.length_cells))
        if exiting < n:
            state.exit_log.extend((int(vid), state.time_step) for vid in lane.truncate(exiting))

    state.time_step += 1
    return state


def _lane_change_plan(state, road, lo=-1, hi=INF_GAP):
    """
    Best admissible lateral move of every vehicle with lo < cell <= hi.

    Returns scan-ordered arrays (key, lane, cell, vid, target) with target -1
    where no move qualifies. key = -cell * lanes + lane orders vehicles front
    to back, lower lane first at equal cells.
    """
    keys, lanes, cells, vids, targets = [], [], [], [], []
    for idx, lane in enumerate(state.lanes):
        s = int(np.searchsorted(lane.cell, lo, side='right'))
        e = int(np.searchsorted(lane.cell, hi, side='right'))
        if s == e:
            continue
        n = e - s
        cell, v = lane.cell[s:e], lane.velocity[s:e]
        v_here = np.minimum(np.minimum(road.speed_limit_per_lane[idx], v + 1), _gaps(lane.cell, 1)[s:e])
        best_v = np.full(n, -1, dtype=np.int64)
        target = np.full(n, -1, dtype=np.int64)

        for other_idx in (idx - 1, idx + 1):
            if not 0 <= other_idx < road.lanes:
                continue
            other = state.lanes[other_idx]
            pos = np.searchsorted(other.cell, cell)
            has_ahead = pos < len(other)
            ahead = np.full(n, INF_GAP, dtype=np.int64)
            ahead[has_ahead] = other.cell[pos[has_ahead]]
            has_follower = pos > 0
            safe = np.ones(n, dtype=bool)
            behind = pos[has_follower] - 1
            safe[has_follower] = cell[has_follower] - other.cell[behind] - 1 >= other.velocity[behind]

            gap = np.where(has_ahead, ahead - cell - 1, INF_GAP)
            v_there = np.minimum(np.minimum(road.speed_limit_per_lane[other_idx], v + 1), gap)
            better = (ahead != cell) & safe & (v_there > v_here) & (v_there > best_v)
            target[better] = other_idx
            best_v[better] = v_there[better]

        keys.append(-cell * road.lanes + idx)
        lanes.append(np.full(n, idx, dtype=np.int64))
        cells.append(cell)
        vids.append(lane.vid[s:e])
        targets.append(target)

    if not keys:
        return tuple(_no_vehicles() for _ in range(5))
    order = np.argsort(np.concatenate(keys))
    return tuple(np.concatenate(col)[order] for col in (keys, lanes, cells, vids, targets))


def _cell_behind(lane, cell):
    """Cell of the nearest vehicle strictly behind cell, -1 when there is none."""
    pos = int(np.searchsorted(lane.cell, cell))
    return int(lane.cell[pos - 1]) if pos > 0 else -1


def plan_lane_changes(state, road, params):
    """
    Lateral moves for one step, applied before the longitudinal update.

    Vehicles are scanned front to back across lanes (ties: lower lane index
    first). A vehicle moves to an adjacent lane when its achievable velocity
    there, min(limit, v + 1, G(t, 1)), is strictly higher, the target cell is
    empty and the trailing vehicle there is not closer than its own velocity;
    then it moves with probability LANE_CHANGE_PROBABILITY. The right
    neighbour is checked before the left.

    Admissibility is evaluated for all vehicles at once. A move from lane a to
    lane b at cell c can only change the plan of vehicles ahead of the nearest
    vehicle behind c in lanes a and b, so only those are re-evaluated. The
    lane-change rule does not read params.
    """
    if road.lanes < 2:
        return state
    rng = state.rng
    plan = _lane_change_plan(state, road)
    moved = []

    while True:
        key, lane, cell, vid, target = plan
        chosen = None
        for i in np.flatnonzero(target >= 0):
            if rng.random() < LANE_CHANGE_PROBABILITY:
                chosen = i
                break
        if chosen is None:
            return state

        c, source, dest = int(cell[chosen]), int(lane[chosen]), int(target[chosen])
        here = state.lanes[source]
        _, v, moving, prev = here.pop(int(np.searchsorted(here.cell, c)))
        state.lanes[dest].insert(c, v, moving, prev)
        moved.append(moving)

        lo = min(_cell_behind(state.lanes[source], c), _cell_behind(state.lanes[dest], c))
        fresh = _lane_change_plan(state, road, lo, c)
        keep = (fresh[0] > key[chosen]) & ~np.isin(fresh[3], moved)
        rest = slice(chosen + 1, None)
        untouched = cell[rest] <= lo
        plan = tuple(np.concatenate([new[keep], old[rest][untouched]]) for new, old in zip(fresh, plan))


def inject_vehicles(state, record):
    """
    Queue one minute's origin arrivals. Arrival i of c is due at step
    base + floor(i * 33 / c), base being the current step.
    """
    base = state.time_step
    state.minute_count = record.count
    for i in range(record.count):
        state.pending.append(Arrival(due_step=base + (i * STEPS_PER_MINUTE) // record.count,
                                     speed_kmh=record.speed_kmh))
    return state


def admit_arrivals(state, road):
    """Place due arrivals at cell 0 of a uniformly chosen free lane."""
    rng = state.rng
    while state.pending and state.pending[0].due_step <= state.time_step:
        free = [k for k, lane in enumerate(state.lanes) if len(lane) == 0 or lane.cell[0] > 0]
        if not free:
            break
        lane_idx = free[int(rng.integers(len(free)))]
        arrival = state.pending.popleft()
        v = min(max(kmh_to_cells(arrival.speed_kmh), 1), road.speed_limit_per_lane[lane_idx])
        state.place(lane_idx, 0, v)

    backlog = len(state.pending)
    if backlog > SATURATION_FACTOR * max(state.minute_count, 1):
        minute = state.time_step // STEPS_PER_MINUTE
        if not state.saturation_minutes or state.saturation_minutes[-1] != minute:
            if not state.saturation_minutes:
                logger.warning(f"Origin saturated at minute {minute}: {backlog} vehicles waiting")
            state.saturation_minutes.append(minute)
    return state


def run_scenario(road, params, inflow, minutes, seed, first_minute=None):
    """
    Run one scenario and log every vehicle sample.

    Each step: admit due arrivals, plan lane changes, apply R0-R5, record.

    Args:
        road: RoadConfig
        params: ModelParams
        inflow: InflowSchedule covering [first_minute, first_minute + minutes)
        minutes: Number of simulated minutes
        seed: Seed for the run's single generator
        first_minute: Absolute minute of step 0 (default: inflow's first minute)

    Returns:
        SampleLog
    """
    start = inflow.first_minute if first_minute is None else first_minute
    if start is None:
        if minutes > 0:
            raise ValueError("inflow schedule is empty")
        start = 0
    missing = inflow.missing_minutes(start, start + minutes)
    if missing:
        raise ValueError(f"inflow has no record for minute(s) {missing[:5]}{'...' if len(missing) > 5 else ''}")

    state = SimState.new(road, seed)
    chunks = []
    for m in range(minutes):
        inject_vehicles(state, inflow.record(start + m))
        for _ in range(STEPS_PER_MINUTE):
            admit_arrivals(state, road)
            plan_lane_changes(state, road, params)
            t = state.time_step
            step(state, road, params)
            if state.vehicles_present:
                lane, cell, velocity, vid = state.snapshot()
                chunks.append((np.full(cell.size, t, dtype=np.int64), lane, cell, velocity, vid))

    total_steps = minutes * STEPS_PER_MINUTE
    if not chunks:
        log = SampleLog.empty(total_steps, start)
    else:
        columns = [np.concatenate(col) for col in zip(*chunks)]
        log = SampleLog(*columns, total_steps, start)
    log.injected = state.injected
    log.exited = len(state.exit_log)
    log.saturation_minutes = [start + m for m in state.saturation_minutes]
    logger.debug(f"{params}: injected={log.injected} exited={log.exited} samples={len(log)}")
    return log
