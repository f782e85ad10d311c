"""
Command-line front end.

    python backend/cli.py simulate --config configs/ken_o.ini --theta 0.40,0.12,0.12,0.95 --out sim.csv
    python backend/cli.py twin     --config configs/twin_ci.ini --out twin/
    python backend/cli.py impute   --config configs/twin_ci.ini --obs twin/observed.csv \\
                                   --counters twin/counters.csv --out run/
    python backend/cli.py eval     --imputed run/imputed.csv --reference twin/truth.csv --out run/eval.csv

Exit status: 0 success, 1 usage error, 2 data or validation error, 3 internal error.
"""
import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from config import LOG_LEVEL, STEPS_PER_MINUTE, derive_seed, load_run_config, validate_config
from data_sources import (
    read_counters_csv,
    read_patches_csv,
    write_counters_csv,
    write_eval_csv,
    write_marginals_csv,
    write_patches_csv,
    write_posterior_csv,
)
from imputation import (
    evaluate_mae,
    inflow_from_counters,
    reference_from_counters,
    run_pipeline,
    synth_twin,
)
from snfs import ModelParams, cells_to_kmh, run_scenario
from velocity_field import aggregate
from visualize import create_eval_table, create_velocity_heatmap, print_visual_analysis, write_pgm

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3


class UsageError(Exception):
    pass


class _ArgumentParser(argparse.ArgumentParser):
    """Raise instead of exiting so usage problems map to EXIT_USAGE."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _banner(title):
    print("\n" + "=" * 60)
    print(title)
    print("=" * 60)


def _load_config(path):
    if path is None:
        raise UsageError("--config is required")
    if not Path(path).is_file():
        raise UsageError(f"config file not found: {path}")
    return load_run_config(path)


def _out_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _vmax_kmh(road):
    return float(cells_to_kmh(max(road.speed_limit_per_lane)))


def cmd_simulate(args):
    """One scenario: patches CSV (+ heatmap PGM) for the counters inflow or the [twin]/[demand] ramp."""
    cfg = _load_config(args.config)
    road = cfg.road.to_road()
    theta = ModelParams.from_sequence(args.theta.split(','))
    grid_spec = cfg.pipeline_config(args.grid).grid
    if args.strict_grid and not grid_spec.contains(theta):
        raise ValueError(f"theta {theta} is not on the scenario lattice (--strict-grid)")

    if args.counters:
        inflow = inflow_from_counters(read_counters_csv(args.counters))
    else:
        demand = cfg.twin if cfg.twin is not None else cfg.demand
        inflow = demand.to_schedule(cfg.pipeline.warmup)

    seed = cfg.pipeline.seed if args.seed is None else args.seed
    log = run_scenario(road, theta, inflow, inflow.minutes, derive_seed(seed, 'simulate'))
    grid = aggregate(log, road)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_patches_csv(grid, out)
    write_pgm(grid, out.with_suffix('.pgm'), _vmax_kmh(road))

    _banner(f"SIMULATION: {theta}")
    print(f"Minutes: {log.minutes} ({log.total_steps} steps of {STEPS_PER_MINUTE}/min)")
    print(f"Vehicles injected: {log.injected}, exited: {log.exited}")
    if log.saturation_minutes:
        print(f"⚠️  Origin saturated from minute {log.saturation_minutes[0]}")
    print(create_velocity_heatmap(grid, title="SIMULATED"))
    print(f"✅ Wrote {out}")
    return EXIT_OK


def cmd_twin(args):
    """Synthetic truth, masked observations and virtual counters."""
    cfg = _load_config(args.config)
    if cfg.twin is None:
        raise ValueError(f"{args.config}: [twin] section required")
    road = cfg.road.to_road()
    pipeline = cfg.pipeline_config(args.grid)
    theta = ModelParams.from_sequence(cfg.twin.theta)
    seed = cfg.pipeline.seed if args.seed is None else args.seed
    warmup = cfg.pipeline.warmup

    twin = synth_twin(road, theta, cfg.twin.to_schedule(warmup), cfg.twin.to_mask_spec(), seed,
                      warmup=warmup, grid=pipeline.grid if args.strict_grid else None)

    out = _out_dir(args.out)
    write_patches_csv(twin.truth, out / 'truth.csv')
    write_patches_csv(twin.observed, out / 'observed.csv')
    write_counters_csv(twin.counters, out / 'counters.csv')
    write_pgm(twin.truth, out / 'truth.pgm', _vmax_kmh(road))
    write_pgm(twin.observed, out / 'observed.pgm', _vmax_kmh(road))

    congested = twin.truth.values < cfg.twin.threshold_kmh
    _banner(f"SYNTHETIC TWIN: {theta}")
    print(f"Patches: {twin.truth.segments} segments x {twin.truth.minutes} minutes "
          f"(warm-up {warmup} min kept in counters only)")
    print(f"Missing overall: {twin.observed.missing_fraction:.1%}")
    if congested.any():
        print(f"Congested patches: {int(congested.sum())}, "
              f"missing among them: {twin.observed.missing[congested].mean():.1%}")
    else:
        print(f"⚠️  No patch below {cfg.twin.threshold_kmh} km/h")
    if twin.saturation_minutes:
        print(f"⚠️  Origin saturated from minute {twin.saturation_minutes[0]}")
    print(create_velocity_heatmap(twin.truth, title="TRUTH"))
    print(f"✅ Wrote truth.csv, observed.csv, counters.csv and PGMs to {out}")
    return EXIT_OK


def cmd_impute(args):
    """Sliding-window assimilation and imputation of an observation stream."""
    cfg = _load_config(args.config)
    pipeline = cfg.pipeline_config(args.grid, seed=args.seed, workers=args.workers,
                                   progress=sys.stderr.isatty())
    observed, _ = read_patches_csv(args.obs, segments=pipeline.road.segments)
    counters = read_counters_csv(args.counters)

    result = run_pipeline(observed, counters, pipeline)

    out = _out_dir(args.out)
    vmax = _vmax_kmh(pipeline.road)
    write_patches_csv(result.imputed, out / 'imputed.csv', imputed=result.imputed_mask)
    write_posterior_csv(result.posterior, out / 'posterior.csv')
    write_marginals_csv(result.marginals, out / 'marginals.csv')
    write_pgm(observed, out / 'observed.pgm', vmax)
    write_pgm(result.map_grid, out / 'map_simulation.pgm', vmax)
    write_pgm(result.imputed, out / 'imputed.pgm', vmax, mask=result.imputed_mask)

    _banner("IMPUTATION RUN")
    shape = pipeline.grid.shape
    print(f"Scenarios: {int(np.prod(shape))} (lattice {' x '.join(map(str, shape))}), window {pipeline.window} min")
    for warning in result.warnings:
        print(f"⚠️  {warning}")
    print_visual_analysis(result, observed)
    print(f"✅ Wrote imputed.csv, posterior.csv, marginals.csv and PGMs to {out}")
    return EXIT_OK


def cmd_eval(args):
    """MAE of an imputed grid against a truth grid or one counter's speeds."""
    imputed, flags = read_patches_csv(args.imputed, strict=False)
    if flags is None:
        raise ValueError(f"{args.imputed}: 'imputed' column required to tell missing from observed patches")
    observed = imputed.copy()
    observed.values[flags] = float('nan')

    if args.counter_km is not None:
        cfg = _load_config(args.config)
        reference = reference_from_counters(read_counters_csv(args.reference), cfg.road.to_road(),
                                            args.counter_km, imputed)
        label = f"Counter {args.counter_km:g} km"
    else:
        reference, _ = read_patches_csv(args.reference, segments=imputed.segments, strict=False)
        label = "Truth grid"

    report = evaluate_mae(imputed, reference, observed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_eval_csv(report, out)

    _banner(f"MAE OF MEAN VELOCITIES ({label})")
    print(create_eval_table(report, label="Imputed"))
    print(f"✅ Wrote {out}")
    return EXIT_OK


def build_parser():
    parser = _ArgumentParser(prog='snfs-impute', description="S-NFS ensemble imputation of missing patch velocities")
    parser.add_argument('-v', '--verbose', action='count', default=0, help="-v info, -vv debug")
    sub = parser.add_subparsers(dest='command', parser_class=_ArgumentParser)

    def common(p, grid=True):
        p.add_argument('--config', help="INI run configuration")
        p.add_argument('--out', required=True, help="output file or directory")
        p.add_argument('--seed', type=int, help="overrides the config seed")
        if grid:
            p.add_argument('--grid', choices=['full', 'ci'], help="scenario lattice preset")
            p.add_argument('--strict-grid', action='store_true', help="theta must lie on the lattice")

    p = sub.add_parser('simulate', help="run one scenario")
    common(p)
    p.add_argument('--theta', required=True, help="p_bn,p,q,r")
    p.add_argument('--counters', help="counters CSV supplying the 0 km inflow")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser('twin', help="synthetic truth and masked observations")
    common(p)
    p.set_defaults(handler=cmd_twin)

    p = sub.add_parser('impute', help="assimilate and impute an observation stream")
    common(p)
    p.add_argument('--obs', required=True, help="observed patches CSV")
    p.add_argument('--counters', required=True, help="counters CSV")
    p.add_argument('--workers', type=int, help="simulation processes (default SNFS_WORKERS)")
    p.set_defaults(handler=cmd_impute)

    p = sub.add_parser('eval', help="MAE against a reference")
    common(p, grid=False)
    p.add_argument('--imputed', required=True, help="imputed patches CSV (with imputed column)")
    p.add_argument('--reference', required=True, help="truth patches CSV, or counters CSV with --counter-km")
    p.add_argument('--counter-km', type=float, help="score against the counter at this position")
    p.set_defaults(handler=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
    except UsageError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_USAGE

    level = {0: LOG_LEVEL.upper(), 1: 'INFO'}.get(args.verbose, 'DEBUG')
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")

    try:
        validate_config()
        return args.handler(args)
    except UsageError as e:
        print(f"❌ Usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError) as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:
        logger.debug("internal error", exc_info=True)
        print(f"❌ Internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == '__main__':
    sys.exit(main())
