"""Front-end tests: config parsing and rejection diagnostics, CSV schema
and byte-stability, SVG self-containment, command exit codes, and the
persisted-store round trip."""

import pytest

from gridfleet.cli import (
    EXIT_CONFIG,
    EXIT_IO,
    EXIT_OK,
    ConfigError,
    default_config,
    cost_repetition_svg,
    gap_task_svg,
    main,
    metrics_csv_text,
    parse_config,
    parse_csv,
    pedestrian_trace_svg,
    solves_csv_text,
    traces_csv_text,
)
from gridfleet.geometry import GeometryConfig
from gridfleet.sim import SimConfig, compute_baselines, run
from gridfleet.geometry import build_layout

GEO = GeometryConfig(rows=2, cols=2)

SMALL_CFG = """
# comment-only line
geometry.rows = 2
geometry.cols = 2
run.tasks = 3
run.seed = 7
run.pedestrian_probability = 0.5
"""


@pytest.fixture(scope="module")
def small_result():
    cfg = SimConfig(agents=3, task_budget=3, geometry=GEO, pedestrian_probability=0.5)
    baselines = compute_baselines(build_layout(GEO), cfg.control)
    return run(cfg, seed=7, mode="cloud_based", baselines=baselines), cfg, baselines


# --- config parsing ---------------------------------------------------------------


def test_empty_config_is_default():
    assert parse_config("") == default_config()
    assert parse_config("\n  \n# only a comment\n") == default_config()


def test_config_roundtrip_values():
    rc = parse_config(SMALL_CFG)
    assert rc.sim.geometry.rows == 2
    assert rc.sim.task_budget == 3
    assert rc.seed == 7
    assert rc.sim.pedestrian_probability == 0.5


def test_unknown_key_reports_line():
    with pytest.raises(ConfigError, match=r"cfg:3: unknown key 'run\.rats'"):
        parse_config("\n\nrun.rats = 4\n", source="cfg")


def test_bad_value_reports_line_and_type():
    with pytest.raises(ConfigError, match=r"cfg:1: bad value 'many' for 'run\.agents' \(expected int\)"):
        parse_config("run.agents = many", source="cfg")
    with pytest.raises(ConfigError, match="expected int"):
        parse_config("geometry.rows = 2.5", source="cfg")


def test_missing_equals_rejected():
    with pytest.raises(ConfigError, match="expected 'key = value'"):
        parse_config("run.agents 3")


def test_duplicate_key_rejected():
    with pytest.raises(ConfigError, match="duplicate key"):
        parse_config("run.seed = 1\nrun.seed = 2")


def test_domain_validation_propagates():
    with pytest.raises(ConfigError, match="horizon"):
        parse_config("control.horizon = 0")
    with pytest.raises(ConfigError, match="probability"):
        parse_config("run.pedestrian_probability = 1.5")
    with pytest.raises(ConfigError, match="dwell"):
        parse_config("run.dwell_min = 9\nrun.dwell_max = 3")
    with pytest.raises(ConfigError, match="mode"):
        parse_config("run.mode = gossip")
    with pytest.raises(ConfigError, match="cloud_in"):
        parse_config("run.cloud_in = store.txt\nrun.mode = both")


# --- CSV emission -----------------------------------------------------------------


def test_metrics_csv_schema_and_stability(small_result):
    res, cfg, baselines = small_result
    text = metrics_csv_text([res])
    lines = text.splitlines()
    assert lines[0] == "key,mode,repetition,agent,J,gap,steps,pedestrian"
    assert len(lines) == 1 + len(res.rows)
    assert all(len(ln.split(",")) == 8 for ln in lines)
    again = run(cfg, seed=7, mode="cloud_based", baselines=baselines)
    assert metrics_csv_text([again]) == text  # byte-identical reruns


def test_csv_text_has_no_numpy_reprs(small_result):
    res, _, _ = small_result
    for text in (metrics_csv_text([res]), solves_csv_text([res]), traces_csv_text([res])):
        assert "np." not in text and "(" not in text


def test_parse_csv_roundtrip(small_result):
    res, _, _ = small_result
    rows = parse_csv(metrics_csv_text([res]))
    assert len(rows) == len(res.rows)
    assert rows[0]["key"] == str(res.rows[0].key)
    assert float(rows[0]["J"]) == res.rows[0].cost
    assert parse_csv("") == []


def test_traces_cover_pedestrian_tasks_only(small_result):
    res, _, _ = small_result
    rows = parse_csv(traces_csv_text([res]))
    ped_seqs = {str(r.seq) for r in res.rows if r.pedestrian}
    assert {r["seq"] for r in rows} == ped_seqs
    assert any(r["detected"] == "1" for r in rows)


# --- SVG plots --------------------------------------------------------------------


def test_svgs_are_self_contained(small_result):
    res, _, _ = small_result
    metric_rows = parse_csv(metrics_csv_text([res]))
    trace_rows = parse_csv(traces_csv_text([res]))
    for svg in (
        cost_repetition_svg(metric_rows),
        gap_task_svg(metric_rows),
        pedestrian_trace_svg(trace_rows),
    ):
        assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
        assert "href" not in svg and "url(" not in svg and "<script" not in svg


def test_svgs_note_missing_data():
    assert "no task executions" in cost_repetition_svg([])
    assert "no task executions" in gap_task_svg([])
    assert "no pedestrian-affected tasks" in pedestrian_trace_svg([])


# --- commands end to end ----------------------------------------------------------


def write_cfg(tmp_path, text=SMALL_CFG):
    p = tmp_path / "exp.cfg"
    p.write_text(text)
    return str(p)


def test_run_command_writes_artifacts(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    out = tmp_path / "out"
    assert main(["run", "--config", cfg, "--out-dir", str(out)]) == EXIT_OK
    for name in (
        "metrics.csv", "solves.csv", "traces.csv",
        "cost_vs_repetition.svg", "gap_vs_task.svg", "pedestrian_trace.svg",
    ):
        assert (out / name).exists(), name
    first = (out / "metrics.csv").read_bytes()
    assert main(["run", "--config", cfg, "--out-dir", str(out)]) == EXIT_OK
    assert (out / "metrics.csv").read_bytes() == first  # determinism, bytewise
    assert "3 tasks" in capsys.readouterr().out


def test_run_command_mode_both_pairs_runs(tmp_path):
    out = tmp_path / "both"
    code = main(["run", "--config", write_cfg(tmp_path), "--mode", "both",
                 "--tasks", "2", "--out-dir", str(out)])
    assert code == EXIT_OK
    rows = parse_csv((out / "metrics.csv").read_text())
    assert {r["mode"] for r in rows} == {"cloud_based", "isolated"}
    by_mode = {}
    for r in rows:
        by_mode.setdefault(r["mode"], []).append((r["key"], r["agent"], r["pedestrian"]))
    assert by_mode["cloud_based"] == by_mode["isolated"]  # identical seeds


def test_cloud_store_roundtrip(tmp_path):
    cfg = write_cfg(tmp_path)
    store = tmp_path / "store.txt"
    assert main(["run", "--config", cfg, "--tasks", "2",
                 "--out-dir", str(tmp_path / "a"), "--cloud-out", str(store)]) == EXIT_OK
    assert store.exists()
    assert main(["run", "--config", cfg, "--tasks", "2",
                 "--out-dir", str(tmp_path / "b"), "--cloud-in", str(store)]) == EXIT_OK


def test_validate_command(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert main(["validate", "--config", cfg]) == EXIT_OK
    out = capsys.readouterr().out
    assert "16/16 seeds valid" in out  # 2x2 grid: 8 directed edges x 2 modes
    assert "baseline=" in out


def test_exit_codes(tmp_path):
    assert main(["run", "--config", str(tmp_path / "missing.cfg")]) == EXIT_IO
    bad = tmp_path / "bad.cfg"
    bad.write_text("run.rats = 4\n")
    assert main(["run", "--config", str(bad)]) == EXIT_CONFIG
    with pytest.raises(SystemExit) as exc:
        main(["run", "--mode", "telepathy"])
    assert exc.value.code == EXIT_CONFIG