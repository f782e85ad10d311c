#!/usr/bin/env python3
"""
Simulator tests: rule sequence, lane changes, origin inflow and run invariants.
"""

import sys
import os
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'backend'))

from bisect import bisect_left

import numpy as np

from snfs import (
    INF_GAP,
    LANE_CHANGE_PROBABILITY,
    InflowRecord,
    InflowSchedule,
    Lane,
    ModelParams,
    RoadConfig,
    SimState,
    admit_arrivals,
    cells_to_kmh,
    inject_vehicles,
    kmh_to_cells,
    plan_lane_changes,
    run_scenario,
    step,
)


def make_road(length=200, lanes=1, limits=None, bottleneck=None):
    limits = limits or (5,) * lanes
    return RoadConfig(length, lanes, tuple(limits), bottleneck or (length - 10, length))


def make_state(road, vehicles, seed=0):
    """vehicles: (lane, cell, velocity) triples; vids follow list order."""
    state = SimState.new(road, seed)
    for lane, cell, v in vehicles:
        state.place(lane, cell, v)
    return state


def constant_inflow(minutes, count, speed_kmh=80.0, first_minute=0):
    return InflowSchedule.from_records(
        [InflowRecord(first_minute + m, count, speed_kmh) for m in range(minutes)]
    )


def blocked_pair(state):
    """Lane 1 follower at cell 50 (v=3) stuck behind a stopped leader; returns the follower's vid."""
    state.lanes = [Lane(), Lane()]
    follower = state.place(1, 50, 3)
    state.place(1, 51, 0)
    return follower


def reference_step(lanes, road, params, rng):
    """Rules R0-R5 vehicle by vehicle; lanes hold [cell, velocity, prev_cell, vid] lists."""
    bn_start, bn_end = road.bottleneck_span
    for lane_idx, lane in enumerate(lanes):
        n = len(lane)
        if n == 0:
            continue
        vmax = road.speed_limit_per_lane[lane_idx]
        quick = rng.random(n) < params.r
        brake_draw = rng.random(n)
        slow_draw = rng.random(n)
        new_v = [0] * n
        leader_v = None
        for j, k in enumerate(range(n - 1, -1, -1)):
            cell, v, prev, _ = lane[k]
            s = 2 if quick[j] else 1
            v = min(vmax, v + 1)
            if slow_draw[j] < params.q and k + s < n:
                v = min(v, max(0, lane[k + s][2] - prev - s))
            if k + s < n:
                v = min(v, lane[k + s][0] - cell - s)
            p_eff = params.p_bn if bn_start <= cell < bn_end else params.p
            if brake_draw[j] < p_eff and v >= 1:
                v -= 1
            if leader_v is not None:
                v = min(v, lane[k + 1][0] - cell - 1 + leader_v)
            new_v[k] = v
            leader_v = v
        moved = [[veh[0] + v, v, veh[0], veh[3]] for veh, v in zip(lane, new_v)]
        lanes[lane_idx] = [veh for veh in moved if veh[0] < road.length_cells]


def reference_lane_changes(lanes, road, rng):
    """Sequential lane-change scan over [cell, velocity, prev_cell, vid] lists."""
    order = sorted(((veh[0], idx, veh[3]) for idx, lane in enumerate(lanes) for veh in lane),
                   key=lambda item: (-item[0], item[1]))
    for cell, _, vid in order:
        idx = next(i for i, lane in enumerate(lanes) if any(veh[3] == vid for veh in lane))
        here = lanes[idx]
        k = next(i for i, veh in enumerate(here) if veh[3] == vid)
        veh = here[k]

        def achievable(lane, pos, limit):
            gap = lane[pos][0] - cell - 1 if pos < len(lane) else INF_GAP
            return min(limit, veh[1] + 1, gap)

        v_here = achievable(here, k + 1, road.speed_limit_per_lane[idx])
        best = None
        for target in (idx - 1, idx + 1):
            if not 0 <= target < road.lanes:
                continue
            other = lanes[target]
            pos = bisect_left([o[0] for o in other], cell)
            if pos < len(other) and other[pos][0] == cell:
                continue
            if pos > 0 and cell - other[pos - 1][0] - 1 < other[pos - 1][1]:
                continue
            v_there = achievable(other, pos, road.speed_limit_per_lane[target])
            if v_there > v_here and (best is None or v_there > best[1]):
                best = (target, v_there, pos)
        if best is not None and rng.random() < LANE_CHANGE_PROBABILITY:
            here.pop(k)
            lanes[best[0]].insert(best[2], veh)


def lane_rows(state):
    return [[[int(c), int(v), int(p), int(i)] for c, v, p, i in zip(lane.cell, lane.velocity, lane.prev_cell, lane.vid)]
            for lane in state.lanes]


def test_velocity_conversions():
    assert kmh_to_cells(120) == 6
    assert kmh_to_cells(0) == 0
    assert kmh_to_cells(52) == 3
    assert kmh_to_cells(50) == 3
    assert cells_to_kmh(3) == 60
    assert np.array_equal(cells_to_kmh(np.array([0, 5])), np.array([0, 100]))


def test_model_params_validation():
    try:
        ModelParams(1.2, 0.1, 0.1, 0.9)
    except ValueError as e:
        assert 'p_bn' in str(e)
    else:
        raise AssertionError("out-of-range p_bn accepted")
    assert ModelParams(0.3, 0.1, 0.1, 0.9) < ModelParams(0.3, 0.1, 0.2, 0.9)


def test_acceleration_by_one_per_step():
    road = make_road()
    params = ModelParams(0.0, 0.0, 0.0, 0.5)
    state = make_state(road, [(0, 0, 0)])
    step(state, road, params)
    assert state.lanes[0].velocity[0] == 1
    step(state, road, params)
    assert state.lanes[0].velocity[0] == 2
    assert state.lanes[0].cell[0] == 3
    assert state.lanes[0].prev_cell[0] == 1


def test_follower_never_reaches_leader_cell():
    road = make_road()
    params = ModelParams(0.0, 0.0, 0.0, 0.0)
    state = make_state(road, [(0, 10, 5), (0, 12, 0)])
    step(state, road, params)
    lane = state.lanes[0]
    assert lane.velocity[0] <= 1 + lane.velocity[1]
    assert lane.cell[0] < lane.cell[1]


def test_platoon_bounded_by_leaders_new_cell():
    # s = 1, no braking: the stopped leader accelerates to 1, the followers keep 1-cell gaps
    road = make_road()
    params = ModelParams(0.0, 0.0, 0.0, 0.0)
    state = make_state(road, [(0, 10, 4), (0, 12, 4), (0, 14, 0)])
    step(state, road, params)
    assert state.lanes[0].velocity.tolist() == [1, 1, 1]
    assert state.lanes[0].cell.tolist() == [11, 13, 15]


def test_full_braking_holds_cruising_velocity():
    road = make_road(length=1000)
    params = ModelParams(1.0, 1.0, 0.0, 0.5)
    state = make_state(road, [(0, 0, 4)])
    for _ in range(20):
        step(state, road, params)
        assert state.lanes[0].velocity[0] == 4


def test_exit_at_downstream_boundary():
    road = make_road(length=50)
    params = ModelParams(0.0, 0.0, 0.0, 0.0)
    state = make_state(road, [(0, 47, 5)])
    step(state, road, params)
    assert state.vehicles_present == 0
    assert state.exit_log == [(0, 0)]
    assert state.time_step == 1


def test_exit_log_lists_front_vehicle_first():
    road = make_road(length=50)
    params = ModelParams(0.0, 0.0, 0.0, 1.0)
    # s = 2 with no second vehicle ahead: both move 5 cells and leave
    state = make_state(road, [(0, 45, 5), (0, 48, 5)])
    step(state, road, params)
    assert state.exit_log == [(1, 0), (0, 0)]


def test_single_vehicle_never_changes_lane():
    road = make_road(lanes=2, limits=(5, 5))
    params = ModelParams(0.3, 0.1, 0.1, 0.9)
    state = make_state(road, [(1, 40, 3)])
    for _ in range(1000):
        plan_lane_changes(state, road, params)
        assert state.lane_of(0) == 1
    assert len(state.lanes[0]) == 0


def test_blocked_vehicle_changes_lane_ten_percent_of_steps():
    road = make_road(lanes=2, limits=(5, 5))
    params = ModelParams(0.3, 0.1, 0.1, 0.9)
    state = make_state(road, [], seed=11)
    moves = 0
    trials = 10_000
    for _ in range(trials):
        follower = blocked_pair(state)
        plan_lane_changes(state, road, params)
        moves += state.lane_of(follower) == 0
    assert 0.09 <= moves / trials <= 0.11, moves / trials


def test_per_minute_lane_change_rate():
    road = make_road(lanes=2, limits=(5, 5))
    params = ModelParams(0.3, 0.1, 0.1, 0.9)
    state = make_state(road, [], seed=12)
    changed = 0
    trials = 10_000
    for _ in range(trials):
        follower = blocked_pair(state)
        for _ in range(33):
            plan_lane_changes(state, road, params)
            if state.lane_of(follower) == 0:
                changed += 1
                break
    expected = 1 - 0.9 ** 33
    assert abs(changed / trials - expected) <= 0.01, changed / trials


def test_unsafe_target_lane_is_refused():
    road = make_road(lanes=2, limits=(5, 5))
    params = ModelParams(0.3, 0.1, 0.1, 0.9)
    # Trailing vehicle in lane 0 two cells back at velocity 4
    state = make_state(road, [(1, 50, 3), (1, 51, 0), (0, 48, 4)], seed=3)
    for _ in range(500):
        plan_lane_changes(state, road, params)
    assert state.lanes[1].cell.tolist() == [50, 51]


def test_array_rules_match_sequential_rules():
    rng = np.random.default_rng(77)
    for trial in range(40):
        lanes = int(rng.integers(2, 4))
        road = make_road(length=300, lanes=lanes, limits=tuple(int(v) for v in rng.integers(3, 7, lanes)),
                         bottleneck=(150, 220))
        params = ModelParams(*rng.uniform(0, 1, 4))
        state = SimState.new(road, trial)
        for lane in range(lanes):
            cells = np.sort(rng.choice(300, size=int(rng.integers(0, 60)), replace=False))
            for cell in cells:
                v = int(rng.integers(0, road.speed_limit_per_lane[lane] + 1))
                state.place(lane, int(cell), v, prev_cell=max(0, int(cell) - v))
        reference = lane_rows(state)
        reference_rng = np.random.default_rng(trial)

        for _ in range(20):
            plan_lane_changes(state, road, params)
            reference_lane_changes(reference, road, reference_rng)
            assert lane_rows(state) == reference, "lane changes differ"
            step(state, road, params)
            reference_step(reference, road, params, reference_rng)
            assert lane_rows(state) == reference, "longitudinal update differs"


def test_empty_minute_injects_nothing():
    road = make_road(lanes=2)
    state = make_state(road, [])
    inject_vehicles(state, InflowRecord(0, 0, 0.0))
    admit_arrivals(state, road)
    assert not state.pending
    assert state.vehicles_present == 0


def test_minute_of_33_arrivals_all_enter():
    road = make_road(length=500, lanes=4)
    params = ModelParams(0.0, 0.0, 0.0, 0.0)
    state = make_state(road, [], seed=5)
    inject_vehicles(state, InflowRecord(0, 33, 100.0))
    for _ in range(33):
        admit_arrivals(state, road)
        plan_lane_changes(state, road, params)
        step(state, road, params)
    assert state.vehicles_present == 33
    assert not state.pending


def test_injected_velocity_from_speed():
    road = make_road(lanes=1, limits=(6,))
    state = make_state(road, [])
    inject_vehicles(state, InflowRecord(0, 1, 100.0))
    admit_arrivals(state, road)
    assert state.lanes[0].velocity[0] == 5
    assert state.lanes[0].cell[0] == 0

    slow = make_state(make_road(lanes=1, limits=(4,)), [])
    inject_vehicles(slow, InflowRecord(0, 1, 10.0))
    admit_arrivals(slow, make_road(lanes=1, limits=(4,)))
    assert slow.lanes[0].velocity[0] == 1


def test_lane_rejects_occupied_cell():
    lane = Lane()
    lane.insert(5, 2, 0)
    try:
        lane.insert(5, 1, 1)
    except ValueError:
        pass
    else:
        raise AssertionError("two vehicles placed on one cell")

def test_inflow_record_validation():
    for bad in [dict(minute=0, count=-1, speed_kmh=80.0), dict(minute=0, count=3, speed_kmh=0.0)]:
        try:
            InflowRecord(**bad)
        except ValueError:
            continue
        raise AssertionError(f"accepted {bad}")


def test_zero_inflow_gives_empty_log():
    road = make_road(length=100)
    log = run_scenario(road, ModelParams(0.3, 0.1, 0.1, 0.9), constant_inflow(1, 0), 1, seed=1)
    assert len(log) == 0
    assert log.total_steps == 33


def test_run_scenario_is_deterministic():
    road = make_road(length=300, lanes=2, limits=(6, 5), bottleneck=(200, 250))
    params = ModelParams(0.5, 0.15, 0.15, 0.95)
    inflow = constant_inflow(5, 25)
    a = run_scenario(road, params, inflow, 5, seed=42)
    b = run_scenario(road, params, inflow, 5, seed=42)
    for name in ('step', 'lane', 'cell', 'velocity', 'vehicle'):
        assert np.array_equal(getattr(a, name), getattr(b, name)), name


def test_sample_count_matches_vehicles_present():
    road = make_road(length=300, lanes=2, limits=(6, 5), bottleneck=(200, 250))
    params = ModelParams(0.5, 0.15, 0.15, 0.95)
    inflow = constant_inflow(3, 20)
    log = run_scenario(road, params, inflow, 3, seed=9)

    state = SimState.new(road, 9)
    present = []
    for m in range(3):
        inject_vehicles(state, inflow.record(m))
        for _ in range(33):
            admit_arrivals(state, road)
            plan_lane_changes(state, road, params)
            step(state, road, params)
            present.append(state.vehicles_present)
    assert np.array_equal(np.bincount(log.step, minlength=99), np.array(present))
    assert len(log) == sum(present)


def test_missing_inflow_minute_rejected():
    road = make_road()
    inflow = InflowSchedule.from_records([InflowRecord(0, 5, 80.0), InflowRecord(2, 5, 80.0)])
    try:
        run_scenario(road, ModelParams(0.3, 0.1, 0.1, 0.9), inflow, 3, seed=0)
    except ValueError as e:
        assert '1' in str(e)
    else:
        raise AssertionError("gap in inflow accepted")


def test_invariants_over_randomized_steps():
    """Exclusion, conservation, velocity bounds and no back-jumps over 10^5 steps."""
    rng = np.random.default_rng(2024)
    total_steps = 0
    for scenario in range(10):
        road = make_road(length=100, lanes=2, limits=(5, 4), bottleneck=(60, 80))
        params = ModelParams(*rng.uniform(0, 1, 4))
        state = SimState.new(road, int(rng.integers(1 << 31)))
        for minute in range(304):
            inject_vehicles(state, InflowRecord(minute, int(rng.integers(0, 40)), float(rng.uniform(10, 120))))
            for _ in range(33):
                admit_arrivals(state, road)
                plan_lane_changes(state, road, params)
                _, cells, _, vids = state.snapshot()
                before = dict(zip(vids.tolist(), cells.tolist()))
                step(state, road, params)
                total_steps += 1

                for lane_idx, lane in enumerate(state.lanes):
                    assert (np.diff(lane.cell) > 0).all(), "two vehicles share a cell"
                    limit = road.speed_limit_per_lane[lane_idx]
                    assert ((lane.velocity >= 0) & (lane.velocity <= limit)).all()
                    assert (lane.cell - lane.prev_cell == lane.velocity).all()
                assert state.vehicles_present + len(state.exit_log) == state.injected
                _, cells, _, vids = state.snapshot()
                assert all(cell >= before[vid] for vid, cell in zip(vids.tolist(), cells.tolist()))
    assert total_steps >= 100_000


def test_bottleneck_slows_traffic():
    road = make_road(length=300, lanes=2, limits=(5, 5), bottleneck=(200, 260))
    params = ModelParams(0.9, 0.05, 0.05, 0.9)
    inflow = constant_inflow(10, 10, speed_kmh=100.0)
    inside, upstream = [], []
    for seed in range(10):
        log = run_scenario(road, params, inflow, 10, seed=seed)
        inside.append(log.velocity[(log.cell >= 200) & (log.cell < 260)].mean())
        upstream.append(log.velocity[(log.cell >= 50) & (log.cell < 150)].mean())
    assert np.mean(inside) <= np.mean(upstream)


def main():
    """Run all tests"""
    print("=" * 60)
    print("S-NFS SIMULATOR TESTS")
    print("=" * 60)

    tests = [(name, func) for name, func in globals().items() if name.startswith('test_') and callable(func)]
    failed = 0
    for name, func in tests:
        try:
            func()
            print(f"✅ PASS: {name}")
        except Exception as e:
            failed += 1
            print(f"❌ FAIL: {name}: {type(e).__name__}: {e}")

    print(f"\nTotal: {len(tests) - failed}/{len(tests)} tests passed")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
