import logging
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path

import pytest

import db
import sweeps
from errors import ConfigError
from main import main
from runs import run_dir_for, solve_run
from settings import load_config, parse_config
from sweeps import Cell, SweepConfig, run_sweep
from tables import check_table, read_manifest, read_table

BASE = """
potential:
  r0: 0.8
  d: 0.03
  v0: 20
  a: 2.0
  wells: 1
disorder:
  density: 0.4
  strength: {strength}
  seeds: {seeds}
solver:
  n_states: 4
  points_per_axis: 32
analysis:
  radial_bins: 8
  map_bins: 4
sweep:
  sizes: {sizes}
  strengths: {strengths}
output:
  root: {root}
  workers: 1
"""


def write_config(tmp_path: Path, sizes="[1]", strengths="[0.3]", seeds="[0]", strength=0.3) -> Path:
    path = tmp_path / "sweep.yaml"
    text = BASE.format(sizes=sizes, strengths=strengths, seeds=seeds, strength=strength, root=tmp_path / "out")
    path.write_text(text, encoding="utf-8")
    return path


def test_cells_are_ordered_by_size_strength_seed():
    cfg = parse_config(BASE.format(sizes="[4, 3]", strengths="[1.0, 0.1]", seeds="[2, 0]", strength=0.0,
                                   root="out"))
    cells = SweepConfig.from_experiment(cfg).cells()
    assert cells[0] == Cell(3, 0.1, 0)
    assert cells[-1] == Cell(4, 1.0, 2)
    assert len(cells) == 8
    assert Cell(3, 0.3, 2).cell_id == "L3-s0.3-seed2"


def test_state_cap_is_checked_before_running():
    cfg = parse_config(BASE.format(sizes="[1]", strengths="[0.1]", seeds="[0]", strength=0.0, root="out"))
    with pytest.raises(ConfigError):
        SweepConfig(sizes=[1], disorder_strengths=[0.1], density=0.4, seeds=[0], n_states=5000, base=cfg)


def test_single_cell_matches_solve(tmp_path):
    config = write_config(tmp_path)
    cfg = load_config(str(config))
    solved = solve_run(cfg)
    result = run_sweep(cfg)
    assert result.statuses == {"L1-s0.3-seed0": "ok"}
    cell = result.sweep_dir / "cells" / "L1-s0.3-seed0"
    seed = solved.run_dir / "seed-0"
    for name in ("energies.csv", "diagnostics.csv", "disorder.bumps"):
        assert (cell / name).read_bytes() == (seed / name).read_bytes()


def test_sweep_tables_follow_their_schemas(tmp_path):
    cfg = load_config(str(write_config(tmp_path, strengths="[0.1, 1.0]", seeds="[0, 1]")))
    result = run_sweep(cfg)
    assert not result.partial
    assert set(result.tables) == {"fig1_map", "fig2_scaling", "fig2_fits", "fig3_stats", "fig4_tv", "ipr_energy"}
    for path in result.tables.values():
        assert check_table(path) == [], path
    _, rows = read_table(result.tables["fig1_map"])
    assert len(rows) == 2 * 4
    assert sum(int(r["n_states"]) for r in rows) == 2 * 2 * 4
    _, rows = read_table(result.tables["ipr_energy"])
    assert len(rows) == 2 * 2 * 4
    manifest = read_manifest(result.sweep_dir / "manifest.yaml")
    assert manifest["status"] == "ok"
    assert [c["cell"] for c in manifest["cells"]] == [
        "L1-s0.1-seed0", "L1-s0.1-seed1", "L1-s1-seed0", "L1-s1-seed1",
    ]


def test_three_sizes_give_a_dimension_fit(tmp_path):
    cfg = load_config(str(write_config(tmp_path, sizes="[1, 2, 3]", strengths="[0.3]")))
    result = run_sweep(cfg)
    _, fits = read_table(result.tables["fig2_fits"])
    all_fits = [r for r in fits if r["class"] == "all"]
    assert {float(r["q"]) for r in all_fits} == {2.0, 3.0, 4.0}
    assert all(int(r["n_sizes"]) == 3 for r in all_fits)


def failing_except(keep: Cell, original):
    def solve_seed(cfg, wells, strength, seed, out_dir, baseline):
        if (wells, strength, seed) != tuple(keep):
            raise RuntimeError("worker lost")
        return original(cfg, wells, strength, seed, out_dir, baseline)
    return solve_seed


def test_interrupted_sweep_resumes_only_failed_cells(tmp_path, monkeypatch):
    cfg = load_config(str(write_config(tmp_path, strengths="[0.1, 0.3]", seeds="[0, 1]")))
    original = sweeps.solve_seed
    monkeypatch.setattr(sweeps, "solve_seed", failing_except(Cell(1, 0.1, 0), original))
    first = run_sweep(cfg)
    assert first.partial
    assert first.n_failed == 3
    assert read_manifest(first.sweep_dir / "manifest.yaml")["status"] == "partial"
    survivor = first.sweep_dir / "cells" / "L1-s0.1-seed0" / "diagnostics.csv"
    kept = survivor.read_bytes()

    monkeypatch.setattr(sweeps, "solve_seed", original)
    second = run_sweep(cfg)
    assert sorted(second.computed) == ["L1-s0.1-seed1", "L1-s0.3-seed0", "L1-s0.3-seed1"]
    assert set(second.statuses.values()) == {"ok"}
    assert survivor.read_bytes() == kept
    ledger = db.db_path(cfg.output.root)
    assert len(db.completed_cells(ledger, cfg.config_hash)) == 4
    assert db.get_run(ledger, cfg.config_hash, "sweep")[1] == "ok"


def test_force_recomputes_every_cell(tmp_path):
    cfg = load_config(str(write_config(tmp_path, seeds="[0, 1]")))
    run_sweep(cfg)
    again = run_sweep(cfg, force=True)
    assert len(again.computed) == 2
    assert run_sweep(cfg).computed == []


def test_all_cells_failing_exits_4(tmp_path, monkeypatch):
    config = write_config(tmp_path, seeds="[0, 1]")

    def broken(*args, **kwargs):
        raise RuntimeError("out of memory")

    monkeypatch.setattr(sweeps, "solve_seed", broken)
    assert main(["sweep", "--config", str(config)]) == 4
    sweep_dir = run_dir_for(load_config(str(config)), "sweep")
    cells = read_manifest(sweep_dir / "manifest.yaml")["cells"]
    assert all(c["status"] == "failed" and "out of memory" in c["error"] for c in cells)
    assert read_manifest(sweep_dir / "cells" / "L1-s0.3-seed1" / "cell.yaml")["status"] == "failed"


def test_sweep_and_solve_share_one_ledger(tmp_path):
    cfg = load_config(str(write_config(tmp_path)))
    solve_run(cfg)
    run_sweep(cfg)
    ledger = db.db_path(cfg.output.root)
    assert db.get_run(ledger, cfg.config_hash, "solve")[1] == "ok"
    assert db.get_run(ledger, cfg.config_hash, "sweep")[1] == "ok"
    assert solve_run(cfg).status == "up-to-date"


def test_dead_worker_process_leaves_a_partial_sweep(tmp_path, monkeypatch):
    config = write_config(tmp_path, seeds="[0, 1]")
    config.write_text(config.read_text(encoding="utf-8").replace("workers: 1", "workers: 2"), encoding="utf-8")
    original = sweeps.solve_seed

    def killed(cfg, wells, strength, seed, out_dir, baseline):
        if seed == 1:
            os._exit(9)
        return original(cfg, wells, strength, seed, out_dir, baseline)

    # fork keeps the patched solver visible inside the workers
    monkeypatch.setattr(sweeps, "ProcessPoolExecutor",
                        partial(ProcessPoolExecutor, mp_context=multiprocessing.get_context("fork")))
    monkeypatch.setattr(sweeps, "solve_seed", killed)
    monkeypatch.delenv("LOCLAB_THREADS", raising=False)
    assert main(["sweep", "--config", str(config)]) == 4

    cfg = load_config(str(config))
    sweep_dir = run_dir_for(cfg, "sweep")
    manifest = read_manifest(sweep_dir / "manifest.yaml")
    assert manifest["status"] == "partial"
    lost = {c["cell"]: c for c in manifest["cells"]}["L1-s0.3-seed1"]
    assert lost["status"] == "failed"
    assert "BrokenProcessPool" in lost["error"]
    assert read_manifest(sweep_dir / "cells" / "L1-s0.3-seed1" / "cell.yaml")["status"] == "failed"
    ledger = db.db_path(cfg.output.root)
    assert "L1-s0.3-seed1" not in db.completed_cells(ledger, cfg.config_hash)

    monkeypatch.setattr(sweeps, "solve_seed", original)
    assert main(["sweep", "--config", str(config)]) == 0
    assert read_manifest(sweep_dir / "manifest.yaml")["status"] == "ok"


def test_failed_cell_logs_its_traceback(tmp_path, monkeypatch, caplog):
    cfg = load_config(str(write_config(tmp_path)))

    def broken(*args, **kwargs):
        raise RuntimeError("singular factor")

    monkeypatch.setattr(sweeps, "solve_seed", broken)
    with caplog.at_level(logging.ERROR, logger="sweeps"):
        run_sweep(cfg)
    (record,) = [r for r in caplog.records if "L1-s0.3-seed0" in r.getMessage()]
    assert record.exc_info is not None
    assert "singular factor" in str(record.exc_info[1])


DESK = """
potential:
  r0: 0.8
  d: 0.03
  v0: 20.0
  a: 2.0
  wells: 3
disorder:
  density: 0.4
  width: 0.2
  seeds: [0, 1, 2]
solver:
  n_states: 100
  points_by_size: {{3: 160}}
  retention:
    mode: none
analysis:
  map_bins: 10
sweep:
  sizes: [3]
  strengths: [0.1, 0.3, 1.0, 2.0]
output:
  root: {root}
"""


@pytest.fixture(scope="module")
def desk_map(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    path = root / "desk.yaml"
    path.write_text(DESK.format(root=root / "out"), encoding="utf-8")
    result = run_sweep(load_config(str(path)))
    assert not result.partial
    _, rows = read_table(result.tables["fig1_map"])
    return {float(r["strength"]): r for r in rows if float(r["e_bin_lo"]) == 0.0}


@pytest.mark.slow
def test_anderson_states_in_lowest_decile_grow_with_disorder(desk_map):
    counts = [int(desk_map[s]["n_anderson"]) for s in (0.1, 0.3, 1.0)]
    assert counts == sorted(counts)
    assert counts[-1] > 0


@pytest.mark.slow
def test_low_band_median_ipr_rises_with_disorder(desk_map):
    weak = float(desk_map[0.1]["median_log10_ipr2"])
    strong = float(desk_map[2.0]["median_log10_ipr2"])
    assert strong > weak
