"""
CSV data layer.

Schemas (comma-separated, header row mandatory, newline "\\n"):
- patches:   minute,segment,mean_velocity_kmh[,imputed]  (empty velocity = missing)
- counters:  minute,position_km,count,speed_kmh           (empty speed = no reading)
- posterior: minute,p_bn,p,q,r,particle_count,kind        (kind: particle | map)
- marginals: minute,parameter,value,probability
- eval:      mae_missing_kmh,mae_observed_kmh,n_missing,n_observed
"""

from pathlib import Path

import numpy as np
import pandas as pd

from velocity_field import PatchGrid

PATCH_COLUMNS = ['minute', 'segment', 'mean_velocity_kmh']
COUNTER_COLUMNS = ['minute', 'position_km', 'count', 'speed_kmh']
POSTERIOR_COLUMNS = ['minute', 'p_bn', 'p', 'q', 'r', 'particle_count', 'kind']
MARGINAL_COLUMNS = ['minute', 'parameter', 'value', 'probability']
EVAL_COLUMNS = ['mae_missing_kmh', 'mae_observed_kmh', 'n_missing', 'n_observed']

FLOAT_FORMAT = '%.6f'


def _read_raw(path, columns):
    """Read every field as text and check the header."""
    path = Path(path)
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError as e:
        raise ValueError(f"{path}: empty file, expected header {','.join(columns)}") from e
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise ValueError(f"{path}: missing column(s) {', '.join(missing)}; expected {','.join(columns)}")
    return df


def _numeric(df, column, path, integer=False, allow_empty=False):
    """
    Parse one text column.

    Raises:
        ValueError naming the first bad row (1-based file line, header = line 1)
    """
    text = df[column].str.strip()
    empty = text == ''
    values = pd.to_numeric(text.where(~empty), errors='coerce')
    bad = values.isna() & ~empty
    if not allow_empty:
        bad |= empty
    if integer:
        bad |= values.notna() & (values != values.round())
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise ValueError(f"{path}: row {row + 2}, column '{column}': invalid value '{df[column].iloc[row]}'")
    return values.to_numpy(dtype=float)


def _fail_row(path, mask, column, message):
    if mask.any():
        row = int(np.flatnonzero(mask)[0])
        raise ValueError(f"{path}: row {row + 2}, column '{column}': {message}")


def _write_frame(df, path):
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator='\n', na_rep='')
    return Path(path)


# --- Patches ---

def read_patches_csv(path, segments=None, strict=True):
    """
    Read a patches CSV into a PatchGrid.

    Args:
        path: CSV path
        segments: Expected segment count (None: inferred from the file)
        strict: Require present velocities > 0 (observation inputs); otherwise >= 0

    Returns:
        (PatchGrid, imputed flags as an (M, T) bool array or None)
    """
    df = _read_raw(path, PATCH_COLUMNS)
    if df.empty:
        raise ValueError(f"{path}: no patch rows")
    minute = _numeric(df, 'minute', path, integer=True)
    segment = _numeric(df, 'segment', path, integer=True)
    velocity = _numeric(df, 'mean_velocity_kmh', path, allow_empty=True)

    _fail_row(path, minute < 0, 'minute', "minute must be >= 0")
    _fail_row(path, segment < 0, 'segment', "segment must be >= 0")
    if segments is not None:
        _fail_row(path, segment >= segments, 'segment', f"road has {segments} segments")
    bad_velocity = (velocity <= 0) if strict else (velocity < 0)
    _fail_row(path, bad_velocity, 'mean_velocity_kmh',
              "velocity must be > 0 km/h" if strict else "velocity must be >= 0 km/h")

    keys = pd.Series(list(zip(minute, segment)))
    _fail_row(path, keys.duplicated().to_numpy(), 'segment', "duplicate (minute, segment) patch")

    frame = pd.DataFrame({'minute': minute, 'segment': segment, 'mean_velocity_kmh': velocity})
    grid = PatchGrid.from_frame(frame, segments)

    flags = None
    if 'imputed' in df.columns:
        flag = _numeric(df, 'imputed', path, integer=True)
        _fail_row(path, ~np.isin(flag, (0, 1)), 'imputed', "flag must be 0 or 1")
        flags = np.zeros(grid.values.shape, dtype=bool)
        flags[segment.astype(int), minute.astype(int) - grid.first_minute] = flag.astype(bool)
    return grid, flags


def write_patches_csv(grid, path, imputed=None):
    """Write a PatchGrid in long format, minute-major; optional 0/1 `imputed` column."""
    df = grid.to_frame()
    if imputed is not None:
        df['imputed'] = np.asarray(imputed, dtype=int).T.ravel()
    return _write_frame(df, path)


# --- Counters ---

def read_counters_csv(path):
    """
    Read and validate counter readings.

    Returns:
        DataFrame with minute (int), position_km, count (int), speed_kmh (NaN when absent)
    """
    df = _read_raw(path, COUNTER_COLUMNS)
    minute = _numeric(df, 'minute', path, integer=True)
    position = _numeric(df, 'position_km', path)
    count = _numeric(df, 'count', path, integer=True)
    speed = _numeric(df, 'speed_kmh', path, allow_empty=True)

    _fail_row(path, minute < 0, 'minute', "minute must be >= 0")
    _fail_row(path, position < 0, 'position_km', "position must be >= 0 km")
    _fail_row(path, count < 0, 'count', "count must be >= 0")
    _fail_row(path, speed < 0, 'speed_kmh', "negative speed")

    out = pd.DataFrame({
        'minute': minute.astype(np.int64),
        'position_km': position,
        'count': count.astype(np.int64),
        'speed_kmh': speed,
    })
    dup = out.duplicated(['minute', 'position_km']).to_numpy()
    _fail_row(path, dup, 'position_km', "duplicate (minute, position_km) reading")
    return out


def write_counters_csv(counters, path):
    return _write_frame(counters[COUNTER_COLUMNS], path)


# --- Posterior, marginals, evaluation ---

def write_posterior_csv(posterior, path):
    return _write_frame(posterior[POSTERIOR_COLUMNS], path)


def read_posterior_csv(path):
    df = _read_raw(path, POSTERIOR_COLUMNS)
    out = pd.DataFrame({c: _numeric(df, c, path) for c in POSTERIOR_COLUMNS[:-1]})
    out['minute'] = out['minute'].astype(np.int64)
    out['particle_count'] = out['particle_count'].astype(np.int64)
    out['kind'] = df['kind'].str.strip()
    _fail_row(path, ~out['kind'].isin(['particle', 'map']).to_numpy(), 'kind', "kind must be 'particle' or 'map'")
    return out


def write_marginals_csv(marginals, path):
    return _write_frame(marginals[MARGINAL_COLUMNS], path)


def read_marginals_csv(path):
    """
    Read per-minute parameter marginals.

    Returns:
        DataFrame with minute (int), parameter, value, probability
    """
    df = _read_raw(path, MARGINAL_COLUMNS)
    out = pd.DataFrame({
        'minute': _numeric(df, 'minute', path, integer=True).astype(np.int64),
        'parameter': df['parameter'].str.strip(),
        'value': _numeric(df, 'value', path),
        'probability': _numeric(df, 'probability', path),
    })
    names = POSTERIOR_COLUMNS[1:5]
    _fail_row(path, ~out['parameter'].isin(names).to_numpy(), 'parameter',
              f"parameter must be one of {', '.join(names)}")
    prob = out['probability'].to_numpy()
    _fail_row(path, (prob < 0) | (prob > 1), 'probability', "probability must be in [0, 1]")
    return out


def write_eval_csv(report, path):
    return _write_frame(report.to_frame()[EVAL_COLUMNS], path)


def read_eval_csv(path):
    df = _read_raw(path, EVAL_COLUMNS)
    return pd.DataFrame({
        'mae_missing_kmh': _numeric(df, 'mae_missing_kmh', path, allow_empty=True),
        'mae_observed_kmh': _numeric(df, 'mae_observed_kmh', path, allow_empty=True),
        'n_missing': _numeric(df, 'n_missing', path, integer=True).astype(np.int64),
        'n_observed': _numeric(df, 'n_observed', path, integer=True).astype(np.int64),
    })
