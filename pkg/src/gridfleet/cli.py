"""Experiment front end.

Flat-text config parsing, the `run` and `validate` commands, CSV emission,
and small self-contained SVG plots. The CSVs are the authoritative
artifacts with a fixed schema; every plot is generated from the written
CSV text alone, so external tooling can regenerate or extend them.

Exit codes: 0 success, 1 config error, 2 runtime/solver failure, 3 IO
failure.
"""

from __future__ import annotations

import argparse
import html
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .cloud import CloudStore, load as load_store, persist as persist_store, upload
from .geometry import GeometryConfig, Layout, build_layout
from .lmpc import LmpcConfig, baseline_optimal, initial_trajectory
from .sim import (
    SimConfig,
    SimResult,
    SimulationError,
    compute_baselines,
    run,
    store_context,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_IO = 3

RUN_MODES = ("cloud_based", "isolated", "both")

METRICS_COLUMNS = "key,mode,repetition,agent,J,gap,steps,pedestrian"
SOLVES_COLUMNS = "mode,seq,agent,key,tick,kind,chain,status,iterations,objective,stage0,candidate_residual"
TRACES_COLUMNS = "mode,seq,agent,key,step,px,py,vx,vy,along,lateral,detected,crosswalk,hold_limit"

GAP_WINDOW = 5  # sliding window for the gap-vs-task plot
COST_PLOT_KEYS = 4  # how many task keys the cost-vs-repetition plot shows


class ConfigError(ValueError):
    """Bad key, bad value, or a violated precondition in the run setup."""


@dataclass(frozen=True)
class RunConfig:
    sim: SimConfig
    seed: int = 0
    mode: str = "cloud_based"
    out_dir: str = "out"
    cloud_in: str | None = None
    cloud_out: str | None = None

    def __post_init__(self):
        if self.mode not in RUN_MODES:
            raise ConfigError(f"mode must be one of {RUN_MODES}, got {self.mode!r}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.cloud_in is not None and self.mode != "cloud_based":
            raise ConfigError("cloud_in requires mode cloud_based")


def default_config() -> RunConfig:
    return RunConfig(sim=SimConfig())


# --- config file ------------------------------------------------------------------

_RUN_KEYS = {
    "seed": int,
    "mode": str,
    "out_dir": str,
    "cloud_in": str,
    "cloud_out": str,
    "agents": int,
    "tasks": int,
    "pedestrian_probability": float,
    "dwell_min": int,
    "dwell_max": int,
    "max_task_steps": int,
}
_GEOMETRY_KEYS = {f.name: type(f.default) for f in fields(GeometryConfig)}
_CONTROL_KEYS = {f.name: type(f.default) for f in fields(LmpcConfig)}


def _known_keys() -> dict[str, type]:
    table = {f"run.{k}": t for k, t in _RUN_KEYS.items()}
    table.update({f"geometry.{k}": t for k, t in _GEOMETRY_KEYS.items()})
    table.update({f"control.{k}": t for k, t in _CONTROL_KEYS.items()})
    return table


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse `key = value` lines with dotted sections (run., geometry.,
    control.). Unknown keys and unparsable values are rejected with the
    offending line; an empty file yields the experiment defaults."""
    table = _known_keys()
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in table:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        caster = table[key]
        try:
            values[key] = caster(value)
        except ValueError:
            raise ConfigError(
                f"{source}:{lineno}: bad value {value!r} for {key!r} (expected {caster.__name__})"
            ) from None
    return _assemble(values)


def _assemble(values: dict[str, object]) -> RunConfig:
    def section(prefix: str) -> dict[str, object]:
        n = len(prefix)
        return {k[n:]: v for k, v in values.items() if k.startswith(prefix)}

    try:
        geometry = GeometryConfig(**section("geometry."))
        control = LmpcConfig(**section("control."))
        r = section("run.")
        dwell = (r.pop("dwell_min", 4), r.pop("dwell_max", 8))
        sim = SimConfig(
            agents=r.pop("agents", 3),
            task_budget=r.pop("tasks", 390),
            pedestrian_probability=r.pop("pedestrian_probability", 0.10),
            dwell_steps=dwell,
            max_task_steps=r.pop("max_task_steps", 200),
            geometry=geometry,
            control=control,
        )
        return RunConfig(sim=sim, **r)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def apply_flags(rc: RunConfig, args: argparse.Namespace) -> RunConfig:
    """Command-line flags override the config file."""
    sim_over = {}
    if args.tasks is not None:
        sim_over["task_budget"] = args.tasks
    if args.agents is not None:
        sim_over["agents"] = args.agents
    over = {}
    for flag in ("seed", "mode", "out_dir", "cloud_in", "cloud_out"):
        v = getattr(args, flag)
        if v is not None:
            over[flag] = v
    try:
        sim = replace(rc.sim, **sim_over) if sim_over else rc.sim
        return replace(rc, sim=sim, **over)
    except (ConfigError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


# --- CSV emission -----------------------------------------------------------------


def metrics_csv_text(results: list[SimResult]) -> str:
    """One row per task execution; float columns go through repr so equal
    runs produce byte-equal files."""
    lines = [METRICS_COLUMNS]
    for res in results:
        for r in res.rows:
            lines.append(
                f"{r.key},{res.mode},{r.repetition},{r.agent},"
                f"{r.cost!r},{r.gap!r},{r.steps},{int(r.pedestrian)}"
            )
    return "\n".join(lines) + "\n"


def solves_csv_text(results: list[SimResult]) -> str:
    lines = [SOLVES_COLUMNS]
    for res in results:
        for s in res.solves:
            lines.append(
                f"{res.mode},{s.seq},{s.agent},{s.key},{s.tick},{s.kind},{s.chain},"
                f"{s.status},{s.iterations},{s.objective!r},{s.stage0!r},{s.candidate_residual!r}"
            )
    return "\n".join(lines) + "\n"


def traces_csv_text(results: list[SimResult]) -> str:
    """Sampled states of every pedestrian-affected task, in task-frame
    coordinates alongside world ones, with the crosswalk reference columns
    the position plot needs."""
    lines = [TRACES_COLUMNS]
    for res in results:
        margin = res.layout.config.crosswalk_margin
        for seq in sorted(res.traces):
            tr = res.traces[seq]
            origin, direction, _, crosswalk = res.layout.task_frame(tr.key)
            lateral_axis = np.array([-direction[1], direction[0]])
            for i, s in enumerate(tr.states):
                rel = s[:2] - origin
                along = float(direction @ rel)
                lateral = float(lateral_axis @ rel)
                det = int(tr.detected[i]) if i < len(tr.detected) else 0
                px, py, vx, vy = (float(v) for v in s)
                lines.append(
                    f"{res.mode},{tr.seq},{tr.agent},{tr.key},{i},"
                    f"{px!r},{py!r},{vx!r},{vy!r},"
                    f"{along!r},{lateral!r},{det},{float(crosswalk)!r},{float(crosswalk - margin)!r}"
                )
    return "\n".join(lines) + "\n"


def parse_csv(text: str) -> list[dict[str, str]]:
    """Minimal reader for the fixed-schema CSVs this module writes."""
    lines = [ln for ln in text.splitlines() if ln]
    if not lines:
        return []
    names = lines[0].split(",")
    return [dict(zip(names, ln.split(","))) for ln in lines[1:]]


# --- SVG plots --------------------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if not np.isfinite(lo) or not np.isfinite(hi):
        return [0.0, 1.0]
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10.0 ** np.floor(np.log10(raw))
    for m in (1.0, 2.0, 5.0, 10.0):
        if raw <= m * mag:
            step = m * mag
            break
    first = np.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + 1e-9 * step:
        ticks.append(float(t))
        t += step
    return ticks or [lo, hi]


def _svg_chart(
    title: str,
    xlabel: str,
    ylabel: str,
    series: list[tuple[str, list[float], list[float]]],
    hlines: list[tuple[str, float]] | None = None,
    note: str | None = None,
    width: int = 680,
    height: int = 420,
) -> str:
    """A fixed-size line chart with axes, ticks, legend, and optional dashed
    reference lines. No external assets, fonts, or scripts."""
    ml, mr, mt, mb = 62, 14, 34, 48
    pw, ph = width - ml - mr, height - mt - mb
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys]
    for _, v in hlines or []:
        ys_all.append(v)
    if not xs_all:
        xs_all, ys_all = [0.0, 1.0], [0.0, 1.0]
    x_lo, x_hi = min(xs_all), max(xs_all)
    y_lo, y_hi = min(ys_all), max(ys_all)
    if x_hi <= x_lo:
        x_hi = x_lo + 1.0
    if y_hi <= y_lo:
        y_hi = y_lo + 1.0
    y_pad = 0.06 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - y_pad, y_hi + y_pad

    def X(x: float) -> float:
        return ml + (x - x_lo) / (x_hi - x_lo) * pw

    def Y(y: float) -> float:
        return mt + ph - (y - y_lo) / (y_hi - y_lo) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif">',
        f'<rect width="{width}" height="{height}" fill="#ffffff"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14" '
        f'fill="#222">{html.escape(title)}</text>',
    ]
    for t in _nice_ticks(x_lo, x_hi):
        if t < x_lo - 1e-9 or t > x_hi + 1e-9:
            continue
        px = X(t)
        out.append(f'<line x1="{px:.1f}" y1="{mt}" x2="{px:.1f}" y2="{mt + ph}" stroke="#e5e5e5"/>')
        out.append(
            f'<text x="{px:.1f}" y="{mt + ph + 16}" text-anchor="middle" font-size="11" '
            f'fill="#444">{t:g}</text>'
        )
    for t in _nice_ticks(y_lo, y_hi):
        py = Y(t)
        out.append(f'<line x1="{ml}" y1="{py:.1f}" x2="{ml + pw}" y2="{py:.1f}" stroke="#e5e5e5"/>')
        out.append(
            f'<text x="{ml - 6}" y="{py + 4:.1f}" text-anchor="end" font-size="11" '
            f'fill="#444">{t:g}</text>'
        )
    out.append(
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>'
    )
    for label, v in hlines or []:
        py = Y(v)
        out.append(
            f'<line x1="{ml}" y1="{py:.1f}" x2="{ml + pw}" y2="{py:.1f}" '
            f'stroke="#888" stroke-dasharray="5 3"/>'
        )
        out.append(
            f'<text x="{ml + pw - 4}" y="{py - 4:.1f}" text-anchor="end" font-size="10" '
            f'fill="#666">{html.escape(label)}</text>'
        )
    for i, (label, xs, ys) in enumerate(series):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{X(x):.2f},{Y(y):.2f}" for x, y in zip(xs, ys))
        if len(xs) == 1:
            out.append(
                f'<circle cx="{X(xs[0]):.2f}" cy="{Y(ys[0]):.2f}" r="3" fill="{color}"/>'
            )
        else:
            out.append(
                f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.6"/>'
            )
        ly = mt + 14 + 15 * i
        out.append(f'<line x1="{ml + pw - 130}" y1="{ly - 4}" x2="{ml + pw - 110}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(
            f'<text x="{ml + pw - 104}" y="{ly}" font-size="11" fill="#222">{html.escape(label)}</text>'
        )
    if note:
        out.append(
            f'<text x="{ml + pw / 2:.1f}" y="{mt + ph / 2:.1f}" text-anchor="middle" '
            f'font-size="12" fill="#777">{html.escape(note)}</text>'
        )
    out.append(
        f'<text x="{ml + pw / 2:.1f}" y="{height - 10}" text-anchor="middle" font-size="12" '
        f'fill="#222">{html.escape(xlabel)}</text>'
    )
    out.append(
        f'<text x="16" y="{mt + ph / 2:.1f}" text-anchor="middle" font-size="12" fill="#222" '
        f'transform="rotate(-90 16 {mt + ph / 2:.1f})">{html.escape(ylabel)}</text>'
    )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cost_repetition_svg(metric_rows: list[dict[str, str]]) -> str:
    """Per-key task cost against repetition count, for the busiest keys."""
    rows = [r for r in metric_rows if r["mode"] == metric_rows[0]["mode"]] if metric_rows else []
    by_key: dict[str, list[tuple[int, float]]] = {}
    for r in rows:
        by_key.setdefault(r["key"], []).append((int(r["repetition"]), float(r["J"])))
    chosen = sorted(by_key, key=lambda k: (-len(by_key[k]), k))[:COST_PLOT_KEYS]
    series = []
    for k in chosen:
        pts = sorted(by_key[k])
        series.append((k, [float(p[0]) for p in pts], [p[1] for p in pts]))
    note = None if series else "no task executions"
    return _svg_chart(
        "Task cost vs repetition", "repetition", "realized cost J", series, note=note
    )


def gap_task_svg(metric_rows: list[dict[str, str]], window: int = GAP_WINDOW) -> str:
    """Optimality gap per agent over its task sequence, smoothed with a
    trailing moving average."""
    series = []
    groups: dict[tuple[str, str], list[float]] = {}
    for r in metric_rows:
        groups.setdefault((r["mode"], r["agent"]), []).append(float(r["gap"]))
    for (mode, agent), gaps in sorted(groups.items()):
        xs, ys = [], []
        for i in range(len(gaps)):
            tail = [g for g in gaps[max(0, i - window + 1) : i + 1] if np.isfinite(g)]
            if tail:
                xs.append(float(i + 1))
                ys.append(float(np.mean(tail)))
        series.append((f"{mode} agent {agent}", xs, ys))
    note = None if series else "no task executions"
    return _svg_chart(
        f"Optimality gap vs task index (window {window})",
        "task index per agent",
        "gap (J - J*) / J*",
        series,
        note=note,
    )


def pedestrian_trace_svg(trace_rows: list[dict[str, str]]) -> str:
    """Along-road progress over time for the first pedestrian-affected task,
    with the crosswalk and hold line marked; detections shown at zero
    height so the hold window is visible."""
    if not trace_rows:
        return _svg_chart(
            "Pedestrian-affected task trace", "time step", "along-road position",
            [], note="no pedestrian-affected tasks in this run",
        )
    first = trace_rows[0]
    mode, seq = first["mode"], first["seq"]
    rows = [r for r in trace_rows if r["mode"] == mode and r["seq"] == seq]
    steps = [float(r["step"]) for r in rows]
    along = [float(r["along"]) for r in rows]
    lateral = [float(r["lateral"]) for r in rows]
    det_steps = [float(r["step"]) for r in rows if r["detected"] == "1"]
    series = [
        (f"along ({first['key']})", steps, along),
        ("lateral", steps, lateral),
    ]
    if det_steps:
        series.append(("detected", det_steps, [0.0] * len(det_steps)))
    hlines = [
        ("crosswalk", float(first["crosswalk"])),
        ("hold line", float(first["hold_limit"])),
    ]
    return _svg_chart(
        f"Pedestrian-affected task {first['key']} (agent {first['agent']})",
        "time step",
        "task-frame position",
        series,
        hlines=hlines,
    )


# --- commands ---------------------------------------------------------------------


def cmd_run(rc: RunConfig) -> int:
    layout = build_layout(rc.sim.geometry)
    initial_store = None
    if rc.cloud_in is not None:
        initial_store = load_store(rc.cloud_in, store_context(layout, rc.sim.control))
    baselines = compute_baselines(layout, rc.sim.control) if rc.sim.task_budget else {}
    modes = ["cloud_based", "isolated"] if rc.mode == "both" else [rc.mode]
    results = []
    for mode in modes:
        res = run(
            rc.sim,
            rc.seed,
            mode,
            baselines=baselines,
            initial_store=initial_store if mode == "cloud_based" else None,
        )
        ped = sum(1 for r in res.rows if r.pedestrian)
        print(f"{mode}: {len(res.rows)} tasks, {ped} pedestrian-affected, {res.ticks} ticks")
        results.append(res)
    if rc.cloud_out is not None:
        persist_store(results[0].stores[0], rc.cloud_out)
        print(f"persisted {results[0].mode} store to {rc.cloud_out}")

    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics_csv_text(results))
    (out / "solves.csv").write_text(solves_csv_text(results))
    (out / "traces.csv").write_text(traces_csv_text(results))
    metric_rows = parse_csv((out / "metrics.csv").read_text())
    trace_rows = parse_csv((out / "traces.csv").read_text())
    (out / "cost_vs_repetition.svg").write_text(cost_repetition_svg(metric_rows))
    (out / "gap_vs_task.svg").write_text(gap_task_svg(metric_rows))
    (out / "pedestrian_trace.svg").write_text(pedestrian_trace_svg(trace_rows))
    for name in (
        "metrics.csv", "solves.csv", "traces.csv",
        "cost_vs_repetition.svg", "gap_vs_task.svg", "pedestrian_trace.svg",
    ):
        print(f"wrote {out / name}")
    return EXIT_OK


def cmd_validate(rc: RunConfig) -> int:
    """Generate and check every task key's seed trajectory and reference
    cost without simulating."""
    layout = build_layout(rc.sim.geometry)
    cfg = rc.sim.control
    store = CloudStore(store_context(layout, cfg))
    failures = 0
    for key in layout.task_keys():
        try:
            record = initial_trajectory(key, layout, cfg)
            upload(store, record)  # runs the full admissibility validation
            seed_cost = float(record.costs_to_go[0])
            baseline = baseline_optimal(key, layout, cfg)
        except (ValueError, RuntimeError) as exc:
            print(f"{key}: FAIL {exc}")
            failures += 1
            continue
        line = f"{key}: seed={seed_cost:.6f} baseline={baseline:.6f}"
        if baseline > seed_cost * (1 + 1e-9):
            line += " FAIL baseline exceeds seed cost"
            failures += 1
        print(line)
    total = len(layout.task_keys())
    print(f"{total - failures}/{total} seeds valid")
    return EXIT_OK if failures == 0 else EXIT_RUNTIME


# --- entry point ------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; config errors are 1
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _build_parser() -> _Parser:
    parser = _Parser(prog="gridfleet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("run", "simulate the fleet and write CSVs and plots"),
        ("validate", "check every task key's seed trajectory and baseline"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="path to a key = value config file")
        p.add_argument("--seed", type=int, help="master RNG seed")
        p.add_argument("--mode", choices=RUN_MODES, help="exchange topology")
        p.add_argument("--out-dir", dest="out_dir", help="artifact directory")
        p.add_argument("--cloud-in", dest="cloud_in", help="store file to resume from")
        p.add_argument("--cloud-out", dest="cloud_out", help="persist the store here")
        p.add_argument("--tasks", type=int, help="total task budget")
        p.add_argument("--agents", type=int, help="fleet size")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.config is not None:
            try:
                text = Path(args.config).read_text()
            except OSError as exc:
                print(f"cannot read config: {exc}", file=sys.stderr)
                return EXIT_IO
            rc = parse_config(text, source=args.config)
        else:
            rc = default_config()
        rc = apply_flags(rc, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "run":
            return cmd_run(rc)
        return cmd_validate(rc)
    except SimulationError as exc:
        print(f"simulation failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except RuntimeError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
