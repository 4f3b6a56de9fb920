import math
import os
import subprocess
import sys

import pytest
from hypothesis import given, settings, strategies as st

from fluxlab import cli
from fluxlab.cli import (ENERGY_COLUMNS, EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, ConfigError, NumericError,
                         format_number, goal_columns, load_config, main, table_format, table_parse)

CONFIGS = os.path.join(os.path.dirname(__file__), os.pardir, "configs")


def write(tmp_path, text, name="exp.ini"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


BASE = """[experiment]
name = t
case = manufactured
degree = 1
refinement = uniform
flux = both
estimators = energy
steps = 2
n0 = 4
"""


def test_format_number_style():
    assert format_number(2.84e-4) == "2.84e-4"
    assert format_number(1.009) == "1.01e0"
    assert format_number(-3.5e12) == "-3.50e12"
    assert format_number(7) == "7"
    assert format_number(None) == ""
    with pytest.raises(NumericError):
        format_number(math.nan)


def test_empty_table_is_header_only():
    assert table_format([], ENERGY_COLUMNS) == ",".join(ENERGY_COLUMNS) + "\n"


def test_one_energy_row():
    row = dict(level=1, dofs=289, true_sq_err=2.84e-4, rate=None, eta_mixed=2.62e-4, ieff_mixed=0.921,
               eta_local=2.97e-4, ieff_local=1.047)
    lines = table_format([row], ENERGY_COLUMNS).splitlines()
    assert len(lines) == 2
    fields = lines[1].split(",")
    assert len(fields) == 8
    assert fields[:4] == ["1", "289", "2.84e-4", ""]


finite = st.floats(allow_nan=False, allow_infinity=False, min_value=-1e300, max_value=1e300)


@settings(max_examples=50, deadline=None)
@given(rows=st.lists(st.fixed_dictionaries({"level": st.integers(0, 99), "dofs": st.integers(1, 10**7),
                                            "true_sq_err": finite, "rate": st.none() | finite}), max_size=5))
def test_roundtrip(rows):
    cols = ("level", "dofs", "true_sq_err", "rate")
    rounded = [{k: (float(format_number(v)) if isinstance(v, float) else v) for k, v in r.items()} for r in rows]
    assert table_parse(table_format(rows, cols)) == rounded
    assert table_parse(table_format(rounded, cols)) == rounded


def test_goal_columns():
    assert goal_columns(["rho_varpi"]) == ("level", "dofs", "goal_err", "rate", "eta_rho_varpi",
                                           "ieff_rho_varpi", "iosc_rho_varpi")


@pytest.mark.parametrize("change", [
    "case = nowhere", "degree = 7", "refinement = random", "flux = magic", "steps = -1", "fraction = 0",
    "estimators = rho_varpi", "estimators = nonsense", "n0 = x",
])
def test_bad_configs_exit_2(tmp_path, change, capsys):
    key = change.split("=")[0].strip()
    lines = [l for l in BASE.splitlines() if not l.startswith(key)]
    path = write(tmp_path, "\n".join(lines + [change]) + "\n")
    with pytest.raises(ConfigError):
        load_config(path)
    assert main(["run", path, "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err


def test_missing_file_and_section(tmp_path):
    assert main(["run", str(tmp_path / "none.ini")]) == EXIT_CONFIG
    assert main(["run", write(tmp_path, "[other]\nx = 1\n")]) == EXIT_CONFIG


def test_odd_slit_grid_rejected(tmp_path):
    path = write(tmp_path, BASE.replace("manufactured", "slit").replace("n0 = 4", "n0 = 5"))
    assert main(["run", path]) == EXIT_CONFIG


def test_zero_steps_writes_header_only(tmp_path):
    path = write(tmp_path, BASE.replace("steps = 2", "steps = 0"))
    assert main(["run", path, "--out", str(tmp_path / "out")]) == EXIT_OK
    assert (tmp_path / "out" / "t.csv").read_text() == ",".join(ENERGY_COLUMNS) + "\n"


def test_non_finite_values_abort_with_exit_3(tmp_path, monkeypatch):
    import fluxlab.adapt as adapt

    def broken(*a, **k):
        return [dict(level=1, dofs=25, true_sq_err=math.inf)]

    monkeypatch.setattr(adapt, "uniform_energy_study", broken)
    out = tmp_path / "out"
    assert main(["run", write(tmp_path, BASE), "--out", str(out)]) == EXIT_NUMERIC
    assert not (out / "t.csv").exists()


def test_run_uniform_energy(tmp_path):
    out = tmp_path / "out"
    assert main(["run", write(tmp_path, BASE), "--out", str(out), "--threads", "1"]) == EXIT_OK
    rows = table_parse((out / "t.csv").read_text())
    assert [r["level"] for r in rows] == [1, 2]
    assert [r["dofs"] for r in rows] == [81, 289]
    assert all(0.5 < r["ieff_local"] < 1.5 for r in rows)


def test_run_adaptive_goal(tmp_path):
    cfg = BASE.replace("uniform", "adaptive").replace("energy", "rho_varpi II_star") + \
        "goal = regularized_point\nflux = local\n"
    cfg = cfg.replace("flux = both\n", "")
    out = tmp_path / "out"
    assert main(["run", write(tmp_path, cfg), "--out", str(out)]) == EXIT_OK
    names = sorted(os.listdir(out))
    assert names == ["t-II_star.csv", "t-performance.csv", "t-rho_varpi.csv"]
    perf = table_parse((out / "t-performance.csv").read_text())
    assert len(perf) == 4


def test_adaptive_energy_skip(tmp_path):
    cfg = BASE.replace("uniform", "adaptive") + "skip = 1\n"
    out = tmp_path / "out"
    assert main(["run", write(tmp_path, cfg), "--out", str(out)]) == EXIT_OK
    rows = table_parse((out / "t.csv").read_text())
    assert [r["level"] for r in rows] == [1, 2]
    assert rows[0]["rate"] is not None


def test_reproducible_and_exported(tmp_path):
    cfg = os.path.join(CONFIGS, "smoke.ini")
    for d in ("a", "b"):
        subprocess.run([sys.executable, "-m", "fluxlab.cli", "run", cfg, "--out", str(tmp_path / d)],
                       check=True, capture_output=True)
    for name in os.listdir(tmp_path / "a"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert {"smoke.csv", "smoke-mesh.txt", "smoke-u.txt"} <= set(os.listdir(tmp_path / "a"))


def test_shipped_configs_validate():
    names = sorted(f for f in os.listdir(CONFIGS) if f.endswith(".ini"))
    assert len(names) >= 10
    for f in names:
        load_config(os.path.join(CONFIGS, f))


def test_check_subcommand(capsys):
    assert main(["check"]) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 7 and all(line.startswith("PASS") for line in out)


def test_atomic_write_leaves_no_temp(tmp_path):
    cli.write_atomic(str(tmp_path / "x.csv"), "a\n")
    assert os.listdir(tmp_path) == ["x.csv"]
