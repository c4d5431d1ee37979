import numpy as np
import pytest

import db
from errors import ParameterError
from grid import Wavefunction, make_grid, normalize
from observables import StateDiagnostics
from tables import (
    check_table,
    diagnostics_row,
    format_versions,
    read_diagnostics,
    read_energies,
    read_manifest,
    read_states,
    read_table,
    write_diagnostics,
    write_energies,
    write_manifest,
    write_states,
    write_table,
)


def test_energies_round_trip_exactly(tmp_path):
    energies = np.array([0.1, 1.0 / 3.0, np.pi])
    write_energies(tmp_path / "energies.csv", energies, [1e-9, 2e-9, 3e-9])
    assert np.array_equal(read_energies(tmp_path / "energies.csv"), energies)
    assert check_table(tmp_path / "energies.csv") == []


def test_plain_energy_file(tmp_path):
    path = tmp_path / "levels.txt"
    path.write_text("# my levels\n1.5\n2.5\n4.0\n", encoding="utf-8")
    assert list(read_energies(path)) == [1.5, 2.5, 4.0]


def test_diagnostics_keep_optional_blanks(tmp_path):
    diag = StateDiagnostics(
        index=3, energy=2.0, e_norm=0.25, ipr2=0.01, ipr_q={2.0: 0.01, 3.0: 0.002},
        t_exp=1.0, v_exp=1.0, tv_ratio=1.0, lambda_db=None, xi_tail=None,
        tail_reason="too_few_bins", label="ambiguous",
    )
    path = write_diagnostics(tmp_path / "d.csv", [diagnostics_row(diag)], [2, 3])
    assert check_table(path) == []
    (back,) = read_diagnostics(path)
    assert back.index == 3
    assert back.xi_tail is None and back.lambda_db is None
    assert back.ipr_q == {2.0: 0.01, 3.0: 0.002}
    assert back.tail_reason == "too_few_bins"
    assert back.label == "ambiguous"


def test_check_reports_problems(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("# energies v1\nindex,energy,residual,extra\n0,1.0,1e-9,5\n", encoding="utf-8")
    assert any("unexpected column" in p for p in check_table(path))

    path.write_text("# energies v1\nindex,energy,residual\n0,,1e-9\n1,2.0\n", encoding="utf-8")
    problems = check_table(path)
    assert any("'energy'" in p for p in problems)
    assert any("line 4" in p for p in problems)

    path.write_text("index,energy,residual\n", encoding="utf-8")
    assert check_table(path)

    path.write_text("# nonsense v1\na\n", encoding="utf-8")
    assert check_table(path) == ["unknown schema 'nonsense'"]

    path.write_text("# energies v9\nindex,energy,residual\n", encoding="utf-8")
    assert check_table(path) == ["version 9 != supported 1"]


def test_unknown_schema_is_refused(tmp_path):
    with pytest.raises(ParameterError):
        write_table(tmp_path / "x.csv", "figures", [])


def test_read_table_returns_strings(tmp_path):
    write_table(tmp_path / "o.csv", "tb_onsite", [{"i": 0, "j": 1, "onsite": 0.5}])
    schema, rows = read_table(tmp_path / "o.csv")
    assert schema == "tb_onsite"
    assert rows == [{"i": "0", "j": "1", "onsite": "0.5"}]


def test_states_are_stored_by_index(tmp_path):
    grid = make_grid(4.0, 16)
    rng = np.random.default_rng(0)
    states = [normalize(Wavefunction(grid, rng.normal(size=grid.shape))) for _ in range(5)]
    write_states(tmp_path, states, [0, 3])
    stored = read_states(tmp_path)
    assert sorted(stored) == [0, 3]
    assert np.array_equal(stored[3].values, states[3].values)
    assert stored[3].grid.side_length == 4.0


def test_manifest_carries_format(tmp_path):
    write_manifest(tmp_path / "manifest.yaml", {"status": "ok", "seeds": [1, 2]})
    data = read_manifest(tmp_path / "manifest.yaml")
    assert data["format"] == "manifest v1"
    assert data["seeds"] == [1, 2]
    assert not (tmp_path / "manifest.tmp").exists()


def test_format_versions_list_every_table():
    versions = format_versions()
    assert versions["field"] == "LLF1"
    assert "diagnostics" in versions["tables"]


def test_ledger_keeps_kinds_apart(tmp_path):
    path = str(tmp_path / "ledger.db")
    db.init_db(path)
    assert db.get_run(path, "abc", "solve") is None
    db.record_run(path, "abc", "solve", "failed", "runs/run-abc")
    db.record_run(path, "abc", "sweep", "ok", "runs/sweep-abc", 3.0)
    db.record_run(path, "abc", "solve", "ok", "runs/run-abc", 1.5)
    assert db.get_run(path, "abc", "solve") == ("solve", "ok", "runs/run-abc", 1.5)
    assert db.get_run(path, "abc", "sweep")[1] == "ok"


def test_ledger_cells(tmp_path):
    path = str(tmp_path / "ledger.db")
    assert db.completed_cells(path, "h") == set()
    db.init_db(path)
    db.record_cell(path, "h", "L1-s0.1-seed0", "ok")
    db.record_cell(path, "h", "L1-s0.1-seed1", "failed", "boom")
    db.record_cell(path, "other", "L1-s0.1-seed2", "ok")
    assert db.completed_cells(path, "h") == {"L1-s0.1-seed0"}
    db.record_cell(path, "h", "L1-s0.1-seed1", "ok")
    assert len(db.completed_cells(path, "h")) == 2
    db.clear_sweep(path, "h")
    assert db.completed_cells(path, "h") == set()
    assert db.completed_cells(path, "other") == {"L1-s0.1-seed2"}


def test_ledger_location_follows_env(monkeypatch, tmp_path):
    monkeypatch.delenv("LOCLAB_DB_PATH", raising=False)
    assert db.db_path("runs").endswith("ledger.db")
    monkeypatch.setenv("LOCLAB_DB_PATH", str(tmp_path / "shared.db"))
    assert db.db_path("runs") == str(tmp_path / "shared.db")
