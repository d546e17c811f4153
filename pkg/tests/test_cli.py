import json
import warnings

import numpy as np
import pytest

from vhempc import ConfigError, InternalInvariantError
from vhempc import cli
from vhempc.cli import load_config, main, parse_trace, read_csv, write_csv

SCALAR = """\
[experiment]
plant = scalar
filter = {kind}
kappa = 0.5
x0 = {x0}
max_steps = 60
repeat = 1
{extra}
"""


def write_config(tmp_path, kind="Pi3", x0="1.9", extra="", name="cfg.ini"):
    path = tmp_path / name
    path.write_text(SCALAR.format(kind=kind, x0=x0, extra=extra))
    return path


def test_simulate_writes_trace_and_certificate(tmp_path):
    cfg = write_config(tmp_path, kind="Pi2", extra="record_all_filters = true")
    out = tmp_path / "run"
    assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
    trace = parse_trace(out / "trace.csv")
    assert trace["k"] == list(range(len(trace["k"])))
    assert trace["case_tag"][-1] == "terminal"
    assert trace["x_x"][0] == 1.9
    np.testing.assert_allclose(trace["Le_running_avg"],
                               np.cumsum(trace["Le"]) / (np.arange(len(trace["Le"])) + 1))
    cert = json.loads((out / "certificate.json").read_text())
    assert cert["passed"] is True and cert["violations"] == {}
    assert cert["steps_to_psi"] <= cert["S_psi_bound"]
    assert cert["config"]["filter_kind"] == "Pi2"
    header, rows = read_csv(out / "filters.csv")
    assert header[:2] == ["k", "N_common"] and rows
    assert b"\r\n" not in (out / "trace.csv").read_bytes()


@pytest.mark.parametrize("extra,x0", [("kappa_typo = 1", "1.9"), ("", "1.9, 2.0"), ("repeat = 0", "1.9"),
                                      ("sigma = 0.5", "1.9"), ("upsilon = 2", "1.9")])
def test_config_errors_exit_2(tmp_path, extra, x0):
    cfg = write_config(tmp_path, x0=x0, extra=extra)
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_missing_and_malformed_config_exit_2(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "none.ini"), "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.ini"
    bad.write_text("plant = scalar\n")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path)]) == 2
    cfg = write_config(tmp_path, kind="Pi9")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    cfg = write_config(tmp_path)
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path), "--jobs", "0"]) == 2


@pytest.mark.parametrize("x0,extra", [("2.5", ""), ("1.9", "N0 = 1")])
def test_initialisation_errors_exit_3(tmp_path, x0, extra):
    cfg = write_config(tmp_path, x0=x0, extra=extra)
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3


def test_internal_invariant_exit_1(tmp_path, monkeypatch):
    def broken(*args, **kwargs):
        raise InternalInvariantError("scan exhausted")
    monkeypatch.setattr(cli, "run_experiment", broken)
    cfg = write_config(tmp_path)
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1


def test_seed_environment_override(tmp_path, monkeypatch):
    cfg = write_config(tmp_path, extra="seed = 5")
    assert load_config(cfg).seed == 5
    monkeypatch.setenv("VHEMPC_SEED", "77")
    assert load_config(cfg).seed == 77
    monkeypatch.setenv("VHEMPC_SEED", "abc")
    with pytest.raises(ConfigError):
        load_config(cfg)


def test_csv_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(11)
    values = np.concatenate([rng.standard_normal(50) * 10.0 ** rng.integers(-300, 300, 50),
                             [0.1, 1 / 3, -0.0, 5e-324, np.pi]])
    path = tmp_path / "v.csv"
    write_csv(path, ["i", "v", "tag"], [[i, v, "A2"] for i, v in enumerate(values)])
    header, rows = read_csv(path)
    assert header == ["i", "v", "tag"]
    back = np.array([float(r[1]) for r in rows])
    assert np.array_equal(back.view(np.int64), values.view(np.int64))


def test_table1_single_weight(tmp_path):
    cfg = write_config(tmp_path, extra="[table1]\nb_grid = 0.1\nx0 = 1.9")
    out = tmp_path / "t"
    assert main(["table1", "--config", str(cfg), "--out", str(out)]) == 0
    header, rows = read_csv(out / "table1.csv")
    assert header == ["b", "N0", "N_bar", "reference_Ja", "error"]
    assert len(rows) == 1 and float(rows[0][0]) == 0.1 and int(rows[0][1]) >= int(rows[0][2])


@pytest.mark.parametrize("jobs", [1, 2])
def test_sweep_writes_per_setting_outputs(tmp_path, jobs):
    cfg = write_config(tmp_path, extra="N0 = 4\n[sweep]\nsettings = 0:0, 1:0")
    out = tmp_path / "s"
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert main(["sweep", "--config", str(cfg), "--out", str(out), "--jobs", str(jobs)]) == 0
    for label in ("u0_s0", "u1_s0"):
        assert (out / label / "trace.csv").exists()
        assert json.loads((out / label / "certificate.json").read_text())["passed"]
    const = parse_trace(out / "u0_s0" / "trace.csv")
    assert set(const["N_k"]) == {4}
    minimal = parse_trace(out / "u1_s0" / "trace.csv")
    for k in range(len(minimal["k"]) - 1):
        if minimal["case_tag"][k] != "terminal" and minimal["case_tag"][k + 1] != "terminal":
            assert minimal["N_k"][k + 1] == max(minimal["Ntilde"][k], 1)
    header, rows = read_csv(out / "summary.csv")
    assert [r[0] for r in rows] == ["u0_s0", "u1_s0"]
    for name in ("panel_horizon.csv", "panel_filter.csv", "panel_stage_cost.csv",
                 "panel_average.csv", "panel_solve_time.csv", "timing_by_horizon.csv"):
        assert (out / name).exists()
    assert "spearman_rho" in json.loads((out / "timing.json").read_text())


def test_timing_trend_statistic():
    rho, medians = cli.timing_trend({1: [1.0, 2.0, 3.0], 4: [5.0], 8: [9.0, 11.0]})
    assert rho == pytest.approx(1.0)
    assert medians == {1: 2.0, 4: 5.0, 8: 10.0}
    rho, _ = cli.timing_trend({1: [1.0]})
    assert np.isnan(rho)


def test_timing_warning_below_threshold(tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "timing_trend", lambda bins: (0.1, {}))
    cfg = write_config(tmp_path, extra="[sweep]\nsettings = 1:0")
    with pytest.warns(UserWarning, match="Spearman"):
        main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "w")])


def test_help_lists_config_keys(capsys):
    with pytest.raises(SystemExit):
        main(["simulate", "--help"])
    assert "record_all_filters" in capsys.readouterr().out


def test_scalar_simulation_trace_has_one_row_per_step(tmp_path):
    cfg = write_config(tmp_path, extra="terminal_steps = 100")
    out = tmp_path / "r"
    assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
    _, rows = read_csv(out / "trace.csv")
    cert = json.loads((out / "certificate.json").read_text())
    assert len(rows) == cert["steps"] == 60
