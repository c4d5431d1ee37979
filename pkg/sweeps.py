"""Ensembles over system size, disorder strength and seed.

Cells run independently (optionally in a process pool) and each writes its own
directory; aggregation always rereads finished cell directories in
(L, strength, seed) order, so resumed and fresh sweeps produce the same tables.
"""

import logging
import os
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from concurrent.futures.process import BrokenProcessPool
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

import db
from errors import ConfigError, LabError, ParameterError
from observables import StateDiagnostics
from runs import (
    CONFIG_NAME,
    MANIFEST_NAME,
    clean_baseline,
    run_dir_for,
    solve_seed,
    stats_for_spectra,
)
from scaling import LABELS, BaselineCurve, fit_fractal_dimension, wavelength_gate
from settings import ExperimentConfig, serialize_config
from solver import MAX_STATES
from tables import read_diagnostics, read_energies, read_manifest, versions, write_manifest, write_table

logger = logging.getLogger(__name__)

CELLS_DIR = "cells"
CELL_MANIFEST = "cell.yaml"
SCALING_CLASSES = ("all", "anderson", "delocalized", "scarred")


class Cell(NamedTuple):
    size: int
    strength: float
    seed: int

    @property
    def cell_id(self) -> str:
        return f"L{self.size}-s{self.strength:g}-seed{self.seed}"


@dataclass(frozen=True)
class SweepConfig:
    sizes: list[int]
    disorder_strengths: list[float]
    density: float
    seeds: list[int]
    n_states: int
    base: ExperimentConfig = field(repr=False)

    def __post_init__(self) -> None:
        if not self.sizes or not self.disorder_strengths or not self.seeds:
            raise ConfigError("sweep axes must be non-empty")
        if self.n_states > MAX_STATES:
            raise ConfigError(f"solver.n_states={self.n_states} exceeds cap {MAX_STATES}")

    @classmethod
    def from_experiment(cls, cfg: ExperimentConfig) -> "SweepConfig":
        return cls(
            sizes=sorted(set(cfg.sweep.sizes)),
            disorder_strengths=sorted(set(cfg.sweep.strengths)),
            density=cfg.disorder.density,
            seeds=sorted(set(cfg.disorder.seeds)),
            n_states=cfg.solver.n_states,
            base=cfg,
        )

    def cells(self) -> list[Cell]:
        return [
            Cell(size, strength, seed)
            for size in self.sizes
            for strength in self.disorder_strengths
            for seed in self.seeds
        ]


@dataclass
class SweepResult:
    sweep_dir: Path
    statuses: dict[str, str]
    computed: list[str]
    tables: dict[str, Path]

    @property
    def n_failed(self) -> int:
        return sum(status != "ok" for status in self.statuses.values())

    @property
    def partial(self) -> bool:
        return self.n_failed > 0


def _run_cell(cfg: ExperimentConfig, cell: Cell, baseline: BaselineCurve, cell_dir: str) -> dict:
    """Worker body: never raises, failures come back as a status record."""
    start = time.perf_counter()
    target = Path(cell_dir)
    if target.exists():
        shutil.rmtree(target)
    try:
        entry = solve_seed(cfg, cell.size, cell.strength, cell.seed, target, baseline)
        entry["status"] = "ok"
    except Exception as exc:  # noqa: BLE001
        logger.exception("Cell %s raised", cell.cell_id)
        entry = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
    return _close_cell(cell, target, entry, start)


def _close_cell(cell: Cell, target: Path, entry: dict, start: float) -> dict:
    target.mkdir(parents=True, exist_ok=True)
    entry.update(cell=cell.cell_id, size=cell.size, strength=cell.strength, seed=cell.seed,
                 wall_time=time.perf_counter() - start)
    write_manifest(target / CELL_MANIFEST, entry)
    return entry


def _lost_cell(cell: Cell, cell_dir: str, exc: BaseException, start: float) -> dict:
    """Record a cell whose worker process died before answering."""
    return _close_cell(cell, Path(cell_dir), {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}, start)


def _cell_ok(cell_dir: Path) -> bool:
    path = cell_dir / CELL_MANIFEST
    return path.exists() and read_manifest(path).get("status") == "ok"


def _workers(cfg: ExperimentConfig) -> int:
    return cfg.output.workers or os.cpu_count() or 1


def run_sweep(cfg: ExperimentConfig, force: bool = False) -> SweepResult:
    """Solve, diagnose and classify every (L, strength, seed) cell, then aggregate.

    Finished cells (ledger and cell manifest agree) are skipped on restart.
    A failing cell is recorded and the sweep carries on.
    """
    sweep = SweepConfig.from_experiment(cfg)
    sweep_dir = run_dir_for(cfg, "sweep")
    cells_dir = sweep_dir / CELLS_DIR
    ledger = db.db_path(cfg.output.root)
    db.init_db(ledger)
    if force:
        db.clear_sweep(ledger, cfg.config_hash)
        shutil.rmtree(sweep_dir, ignore_errors=True)
    cells_dir.mkdir(parents=True, exist_ok=True)
    (sweep_dir / CONFIG_NAME).write_text(serialize_config(cfg), encoding="utf-8")

    cells = sweep.cells()
    finished = db.completed_cells(ledger, cfg.config_hash)
    done = {c.cell_id for c in cells if c.cell_id in finished and _cell_ok(cells_dir / c.cell_id)}
    pending = [c for c in cells if c.cell_id not in done]
    logger.info("Sweep %s: %d cells, %d already complete", cfg.config_hash, len(cells), len(done))

    start = time.perf_counter()
    baselines: dict[int, BaselineCurve] = {}
    baseline_errors: dict[int, str] = {}
    for size in sorted({c.size for c in cells}):
        try:
            baselines[size] = clean_baseline(cfg, size)
        except LabError as exc:
            baseline_errors[size] = f"{type(exc).__name__}: {exc}"
            logger.error("Clean baseline for L=%d failed: %s", size, exc)

    entries: dict[str, dict] = {}
    runnable = []
    for cell in pending:
        if cell.size in baseline_errors:
            entries[cell.cell_id] = {"status": "failed", "error": baseline_errors[cell.size]}
        else:
            runnable.append(cell)

    workers = min(_workers(cfg), max(len(runnable), 1))
    jobs = [(cfg, c, baselines[c.size], str(cells_dir / c.cell_id)) for c in runnable]
    if workers == 1:
        results = (_run_cell(*job) for job in jobs)
        for k, entry in enumerate(results, start=1):
            _finish_cell(ledger, cfg.config_hash, entry, entries, k, len(jobs))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_cell, *job) for job in jobs]
            for k, (future, job) in enumerate(zip(futures, jobs), start=1):
                try:
                    entry = future.result()
                except BrokenProcessPool as exc:
                    logger.error("Worker pool broke while cell %s was pending: %s", job[1].cell_id, exc)
                    entry = _lost_cell(job[1], job[3], exc, start)
                _finish_cell(ledger, cfg.config_hash, entry, entries, k, len(jobs))
    for cell_id, entry in entries.items():
        if entry["status"] != "ok" and "cell" not in entry:
            db.record_cell(ledger, cfg.config_hash, cell_id, "failed", entry["error"])

    statuses = {}
    for cell in cells:
        if cell.cell_id in done:
            statuses[cell.cell_id] = "ok"
        else:
            statuses[cell.cell_id] = entries[cell.cell_id]["status"]
    ok_cells = [c for c in cells if statuses[c.cell_id] == "ok"]
    tables = aggregate(cfg, sweep_dir, ok_cells, baselines) if ok_cells else {}

    result = SweepResult(sweep_dir, statuses, [c.cell_id for c in runnable], tables)
    status = "partial" if result.partial else "ok"
    manifest = {
        "kind": "sweep",
        "config_hash": cfg.config_hash,
        "status": status,
        "versions": versions(),
        "wall_time": time.perf_counter() - start,
        "cells": [
            {
                "cell": c.cell_id,
                "status": statuses[c.cell_id],
                "path": f"{CELLS_DIR}/{c.cell_id}",
                **({"error": entries[c.cell_id]["error"]} if statuses[c.cell_id] != "ok" else {}),
            }
            for c in cells
        ],
        "tables": {name: path.name for name, path in tables.items()},
    }
    write_manifest(sweep_dir / MANIFEST_NAME, manifest)
    db.record_run(ledger, cfg.config_hash, "sweep", status, str(sweep_dir), manifest["wall_time"])
    logger.info("Sweep %s finished: %d ok, %d failed", cfg.config_hash, len(ok_cells), result.n_failed)
    return result


def _finish_cell(ledger: str, sweep_hash: str, entry: dict, entries: dict, k: int, total: int) -> None:
    entries[entry["cell"]] = entry
    db.record_cell(ledger, sweep_hash, entry["cell"], entry["status"], entry.get("error"))
    if entry["status"] == "ok":
        logger.info("Cell %s done in %.1fs (%d/%d)", entry["cell"], entry["wall_time"], k, total)
    else:
        logger.warning("Cell %s failed (%d/%d): %s", entry["cell"], k, total, entry["error"])


# --- aggregation -----------------------------------------------------------------------

def _load_cell(cell_dir: Path) -> tuple[list[StateDiagnostics], np.ndarray]:
    return read_diagnostics(cell_dir / "diagnostics.csv"), read_energies(cell_dir / "energies.csv")


def _energy_bin(e_norm: float, n_bins: int) -> int:
    return int(min(max(int(e_norm * n_bins), 0), n_bins - 1))


def crossover_map_rows(groups: dict[tuple[int, float], list[StateDiagnostics]], n_bins: int) -> list[dict]:
    """Median log10 IPR₂ and class counts per (L, strength, Ẽ bin), seeds pooled."""
    rows = []
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    for (size, strength), diags in sorted(groups.items()):
        members: list[list[StateDiagnostics]] = [[] for _ in range(n_bins)]
        for d in diags:
            members[_energy_bin(d.e_norm, n_bins)].append(d)
        for k, group in enumerate(members):
            row = {
                "size": size,
                "strength": strength,
                "e_bin_lo": edges[k],
                "e_bin_hi": edges[k + 1],
                "n_states": len(group),
                "median_log10_ipr2": float(np.median(np.log10([d.ipr2 for d in group]))) if group else None,
            }
            for label in LABELS:
                row[f"n_{label}"] = sum(d.label == label for d in group)
            rows.append(row)
    return rows


def scaling_rows(groups, q_list) -> tuple[list[dict], list[dict]]:
    """Class-averaged IPR_q per size and the D_q fit across sizes (≥ 3 needed)."""
    strengths = sorted({strength for _, strength in groups})
    sizes = sorted({size for size, _ in groups})
    points, fits = [], []
    for strength in strengths:
        for label in SCALING_CLASSES:
            for q in q_list:
                series = []
                for size in sizes:
                    chosen = [
                        d for d in groups.get((size, strength), [])
                        if (label == "all" or d.label == label) and float(q) in d.ipr_q
                    ]
                    if not chosen:
                        continue
                    mean = float(np.mean([d.ipr_q[float(q)] for d in chosen]))
                    series.append((size, mean))
                    points.append({"class": label, "strength": strength, "size": size, "q": q,
                                   "mean_ipr": mean, "n_states": len(chosen)})
                if len(series) < 3:
                    continue
                fit = fit_fractal_dimension(series, q, label)
                fits.append({"class": label, "strength": strength, "q": q, "slope": fit.slope,
                             "dim_est": fit.dim_est, "stderr": fit.stderr, "n_sizes": fit.n_sizes})
    return points, fits


def window_stats_rows(spectra_groups, windows, n_bins: int, s_max: float) -> list[dict]:
    rows = []
    for (size, strength), spectra in sorted(spectra_groups.items()):
        for window in windows:
            try:
                stats = stats_for_spectra(spectra, window, n_bins, s_max)
            except ParameterError as exc:
                logger.warning("No statistics for L=%d strength=%g window %s: %s",
                               size, strength, window["name"], exc)
                continue
            rows.append({
                "size": size,
                "strength": strength,
                "window": window["name"],
                "n_seeds": len(spectra),
                "n_levels": stats.n_levels,
                "n_ratios": int(stats.ratios.size),
                "mean_sym": stats.mean_sym,
                "tv_poisson": stats.tv_poisson,
                "tv_goe": stats.tv_goe,
            })
    return rows


def aggregate(cfg: ExperimentConfig, sweep_dir: Path, cells: list[Cell],
              baselines: dict[int, BaselineCurve]) -> dict[str, Path]:
    analysis = cfg.analysis
    groups: dict[tuple[int, float], list[StateDiagnostics]] = {}
    spectra: dict[tuple[int, float], list[np.ndarray]] = {}
    tv_rows, ipr_rows = [], []
    for cell in sorted(cells):
        diags, energies = _load_cell(sweep_dir / CELLS_DIR / cell.cell_id)
        key = (cell.size, cell.strength)
        groups.setdefault(key, []).extend(diags)
        spectra.setdefault(key, []).append(energies)
        baseline = baselines.get(cell.size)
        for d in diags:
            common = {"size": cell.size, "strength": cell.strength, "seed": cell.seed,
                      "index": d.index, "energy": d.energy, "e_norm": d.e_norm}
            ipr_rows.append({**common, "ipr2": d.ipr2})
            tv_rows.append({
                **common,
                "tv_ratio": d.tv_ratio,
                "lambda_db": d.lambda_db,
                "wavelength_ok": d.v_exp is not None and wavelength_gate(d.energy, d.v_exp, cfg.potential.a),
                "baseline": baseline.value_at(d.e_norm) if baseline is not None else None,
                "scar_score": d.scar_score,
                "label": d.label or "ambiguous",
            })

    map_rows = crossover_map_rows(groups, analysis.map_bins)
    points, fits = scaling_rows(groups, analysis.q_list)
    stats_rows = window_stats_rows(spectra, analysis.stats_windows, analysis.hist_bins, analysis.hist_s_max)
    tables = {
        "fig1_map": write_table(sweep_dir / "fig1_map.csv", "fig1_map", map_rows),
        "fig2_scaling": write_table(sweep_dir / "fig2_scaling.csv", "fig2_scaling", points),
        "fig2_fits": write_table(sweep_dir / "fig2_fits.csv", "fig2_fits", fits),
        "fig3_stats": write_table(sweep_dir / "fig3_stats.csv", "fig3_stats", stats_rows),
        "fig4_tv": write_table(sweep_dir / "fig4_tv.csv", "fig4_tv", tv_rows),
        "ipr_energy": write_table(sweep_dir / "ipr_energy.csv", "ipr_energy", ipr_rows),
    }
    logger.info("Aggregated %d cells into %d tables", len(cells), len(tables))
    return tables
