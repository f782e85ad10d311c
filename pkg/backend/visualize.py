"""
Visualization utilities for velocity fields.

ASCII heatmaps and charts for terminal summaries, plain-text PGM (P2) images
for the observed, MAP-simulated and imputed fields. No plotting library needed.
"""

from pathlib import Path

import numpy as np

# Slow traffic is drawn dense
HEAT_CHARS = [(20, "█"), (40, "▓"), (60, "▒"), (float('inf'), "░")]
MISSING_CHAR = " "
# MAP trace ranks
LEVEL_CHARS = "0123456789abcdefghijklmnopqrstuvwxyz"


def _heat_char(value):
    if np.isnan(value):
        return MISSING_CHAR
    for limit, char in HEAT_CHARS:
        if value < limit:
            return char
    return HEAT_CHARS[-1][1]


def create_velocity_heatmap(grid, title="VELOCITY FIELD", max_width=80):
    """
    Creates an ASCII heatmap of a patch grid.

    Rows are segments with the downstream end on top, columns are minutes.

    Args:
        grid: PatchGrid (km/h, NaN = missing)
        title: Heading line
        max_width: Maximum number of minute columns

    Returns:
        String containing the heatmap
    """
    values = grid.values
    if values.size == 0:
        return f"{title}\n(No data to display)"

    columns = np.arange(grid.minutes)
    if grid.minutes > max_width:
        columns = np.linspace(0, grid.minutes - 1, max_width, dtype=int)

    heatmap = [f"{title} (minutes {grid.first_minute}-{grid.last_minute})"]
    heatmap.append("     ┌" + "─" * len(columns))
    for m in range(grid.segments - 1, -1, -1):
        heatmap.append(f"{m:4d} │" + "".join(_heat_char(values[m, t]) for t in columns))
    heatmap.append("     └" + "─" * len(columns))
    heatmap.append("█ < 20  ▓ < 40  ▒ < 60  ░ ≥ 60 km/h  (blank = missing)")
    return "\n".join(heatmap)


def create_map_timeline(map_trace, max_width=80):
    """
    Creates an ASCII strip of the MAP parameters per minute.

    Each parameter gets one row; a character is the rank of the MAP value among
    the values the trace visits (0 = smallest), so a flat row means a stable MAP.

    Args:
        map_trace: List of MapEntry
        max_width: Maximum number of minute columns
    """
    if not map_trace:
        return "MAP TRACE\n(No data to display)"
    table = np.array([entry.params.as_tuple() for entry in map_trace])
    columns = np.arange(len(map_trace))
    if len(columns) > max_width:
        columns = np.linspace(0, len(map_trace) - 1, max_width, dtype=int)

    timeline = [f"MAP TRACE (minutes {map_trace[0].minute}-{map_trace[-1].minute})"]
    timeline.append("      ┌" + "─" * len(columns))
    for d, name in enumerate(('p_bn', 'p', 'q', 'r')):
        levels, rank = np.unique(table[:, d], return_inverse=True)
        row = "".join(LEVEL_CHARS[min(rank[t], len(LEVEL_CHARS) - 1)] for t in columns)
        timeline.append(f"{name:>5} │{row}  {levels[0]:.2f}..{levels[-1]:.2f}")
    timeline.append("      └" + "─" * len(columns))
    return "\n".join(timeline)


def create_summary_dashboard(result, observed):
    """
    Creates an ASCII dashboard for one imputation run.

    Args:
        result: PipelineResult
        observed: Observation PatchGrid fed to the pipeline

    Returns:
        String containing dashboard
    """
    last = result.map_trace[-1] if result.map_trace else None
    missing = int(result.imputed_mask.sum())
    total = result.imputed_mask.size

    dashboard = []
    dashboard.append("╔" + "═" * 78 + "╗")
    dashboard.append("║" + "MISSING-VELOCITY IMPUTATION".center(78) + "║")
    dashboard.append("╠" + "═" * 78 + "╣")
    dashboard.append(f"║ {'Segments: ' + str(observed.segments):<25}{'Minutes: ' + str(observed.minutes):<25}"
                     f"{'Missing: ' + f'{missing}/{total}':<28}║")
    if last is not None:
        dashboard.append(f"║ {'MAP at minute ' + str(last.minute) + ': ' + str(last.params):<62}"
                         f"{'particles: ' + str(last.particles):<15}║")
    dashboard.append(f"║ {'MAP entries: ' + str(len(result.map_trace)):<77}║")
    dashboard.append("╠" + "═" * 78 + "╣")
    dashboard.append("║ POSTERIOR MARGINALS (last minute)" + " " * 44 + "║")
    if last is not None and not result.marginals.empty:
        latest = result.marginals[result.marginals['minute'] == last.minute]
        for name, group in latest.groupby('parameter', sort=False):
            top = group.sort_values('probability', ascending=False).iloc[0]
            bar_length = int(round(top['probability'] * 40))
            bar = "█" * bar_length + "░" * (40 - bar_length)
            dashboard.append(f"║   {name:<5} {top['value']:<6.2f} {bar} {top['probability'] * 100:>5.1f}%" + " " * 16 + "║")
    dashboard.append("╚" + "═" * 78 + "╝")
    return "\n".join(dashboard)


def _fmt_mae(v):
    return "   n/a" if np.isnan(v) else f"{v:6.2f}"


def create_eval_table(report, label="Imputation"):
    """Two-column MAE table: missing vs non-missing segments."""
    table = []
    table.append("─" * 60)
    table.append(f"{'':<20}{'Missing segments':>20}{'Non-missing':>20}")
    table.append("─" * 60)
    table.append(f"{label:<20}{_fmt_mae(report.mae_missing) + ' km/h':>20}{_fmt_mae(report.mae_observed) + ' km/h':>20}")
    table.append(f"{'Patches':<20}{report.n_missing:>20}{report.n_observed:>20}")
    table.append("─" * 60)
    return "\n".join(table)


def write_pgm(grid, path, vmax_kmh, mask=None):
    """
    Write a plain PGM (P2): one pixel per patch, downstream segment on the top row.

    Velocity maps linearly from [0, vmax_kmh] to 0-255; missing patches are 0
    and listed in a sidecar `<stem>_mask.pgm` (maxval 1, 1 = missing). An
    explicit mask (segments x minutes) replaces the NaN pattern in the sidecar,
    e.g. to mark which patches of an imputed grid were filled.

    Returns:
        (image path, mask path)
    """
    if vmax_kmh <= 0:
        raise ValueError(f"vmax_kmh must be > 0, got {vmax_kmh}")
    path = Path(path)
    values = grid.values[::-1]
    missing = np.isnan(values)
    pixels = np.clip(np.round(np.nan_to_num(values, nan=0.0) / vmax_kmh * 255), 0, 255).astype(int)
    pixels[missing] = 0
    if mask is not None:
        missing = np.asarray(mask, dtype=bool)[::-1]

    mask_path = path.with_name(f"{path.stem}_mask.pgm")
    _write_p2(path, pixels, 255)
    _write_p2(mask_path, missing.astype(int), 1)
    return path, mask_path


def _write_p2(path, pixels, maxval):
    rows, cols = pixels.shape
    lines = ["P2", f"{cols} {rows}", str(maxval)]
    lines.extend(" ".join(str(v) for v in row) for row in pixels)
    with open(path, 'w', newline='\n') as f:
        f.write("\n".join(lines) + "\n")


def read_pgm(path):
    """Pixel array of a P2 file (rows as stored)."""
    tokens = []
    with open(path) as f:
        for line in f:
            tokens.extend(line.split('#', 1)[0].split())
    if not tokens or tokens[0] != 'P2':
        raise ValueError(f"{path}: not a plain PGM (P2) file")
    cols, rows, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pixels = np.array(tokens[4:], dtype=int)
    if pixels.size != rows * cols or (pixels > maxval).any():
        raise ValueError(f"{path}: pixel data does not match header {cols}x{rows} maxval {maxval}")
    return pixels.reshape(rows, cols)


def print_visual_analysis(result, observed):
    """
    Prints the imputation run's dashboard and heatmaps to the console.

    Args:
        result: PipelineResult
        observed: Observation PatchGrid fed to the pipeline
    """
    print("\n")
    print(create_summary_dashboard(result, observed))
    print("\n")
    print(create_velocity_heatmap(observed, title="OBSERVED"))
    print("\n")
    print(create_velocity_heatmap(result.imputed, title="IMPUTED"))
    print("\n")
    print(create_map_timeline(result.map_trace))
    print("\n")
