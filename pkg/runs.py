"""Single-run pipeline: build V, solve, diagnose, label and persist.

A run directory is named after the config hash and holds one ``seed-<s>``
subdirectory per disorder seed plus ``config.yaml`` and ``manifest.yaml``.
"""

import hashlib
import logging
import shutil
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import yaml

import db
from errors import ConvergenceError, LabError, ParameterError
from grid import Grid2D, ScalarField, make_grid
from observables import StateDiagnostics, diagnose_state
from potential import (
    DisorderRealization,
    build_lattice_potential,
    read_bumps,
    render_disorder,
    sample_disorder,
    total_potential,
    write_bumps,
)
from scaling import BaselineCurve, build_clean_baseline, label_states
from settings import ExperimentConfig, load_config, serialize_config
from solver import (
    MAX_POINTS,
    EigenpairSet,
    build_hamiltonian,
    grid_rule_spacing,
    points_for_spacing,
    solve_lowest,
)
from spectra import SpectrumStats, pool_stats, reference_histogram, spectrum_stats
from tables import (
    diagnostics_row,
    read_diagnostics,
    read_energies,
    read_manifest,
    read_states,
    read_table,
    versions,
    write_diagnostics,
    write_energies,
    write_manifest,
    write_states,
    write_table,
)
from tight_binding import (
    TBModel,
    compare_with_continuum,
    estimate_tb_parameters,
    reduce_to_tb,
    tb_spectrum,
)

logger = logging.getLogger(__name__)

CONFIG_NAME = "config.yaml"
MANIFEST_NAME = "manifest.yaml"
BUMPS_NAME = "disorder.bumps"
BASELINE_DIR = "baselines"


@dataclass(frozen=True)
class RunResult:
    run_dir: Path
    status: str
    manifest: dict


def seed_dirname(seed: int) -> str:
    return f"seed-{seed}"


def run_dir_for(cfg: ExperimentConfig, kind: str = "run") -> Path:
    return Path(cfg.output.root) / f"{kind}-{cfg.config_hash}"


# --- building blocks shared with sweeps -------------------------------------------

def points_for(cfg: ExperimentConfig, wells: int) -> int:
    """Grid points per axis: per-size map, explicit value, then the grid rule."""
    solver = cfg.solver
    if wells in solver.points_by_size:
        return solver.points_by_size[wells]
    if solver.points_per_axis is not None:
        return solver.points_per_axis
    side = cfg.potential.a * wells
    e_target = solver.e_target if solver.e_target is not None else 2.0 * cfg.potential.v0
    spacing = grid_rule_spacing(cfg.potential.d, cfg.disorder.width, e_target, 0.0)
    n = points_for_spacing(side, spacing)
    if n > MAX_POINTS:
        logger.warning("Grid rule asks for %d points per axis at L=%d; capped at %d", n, wells, MAX_POINTS)
        n = MAX_POINTS
    return n


def build_potential(
    cfg: ExperimentConfig, wells: int, strength: float, seed: int, grid: Grid2D | None = None
) -> tuple[ScalarField, DisorderRealization]:
    fermi = cfg.potential.with_wells(wells).fermi
    if grid is None:
        grid = make_grid(fermi.side_length, points_for(cfg, wells))
    v_ext = build_lattice_potential(fermi, grid, cfg.potential.convention)
    realization = sample_disorder(
        cfg.disorder.density,
        strength * cfg.potential.v0,
        cfg.disorder.width,
        seed,
        fermi.side_length,
        cfg.disorder.amplitude_dist,
        cfg.disorder.width_dist,
    )
    return total_potential(v_ext, render_disorder(realization, grid)), realization


def solve_potential(cfg: ExperimentConfig, potential: ScalarField) -> EigenpairSet:
    solver = cfg.solver
    return solve_lowest(
        build_hamiltonian(potential),
        solver.n_states,
        solver.tol,
        method=solver.method,
        seed=solver.seed,
        max_iter=solver.max_iter,
        attempts=solver.attempts,
        itp_time_step=solver.itp_time_step,
    )


def diagnose_eigenpairs(
    cfg: ExperimentConfig, energies, states: dict, residuals, potential: ScalarField
) -> list[StateDiagnostics]:
    """Diagnostics for every index present in ``states``; Ẽ spans the full spectrum."""
    energies = np.asarray(energies, dtype=np.float64)
    analysis = cfg.analysis
    e_min, e_max = float(energies[0]), float(energies[-1])
    return [
        diagnose_state(
            k,
            psi,
            energies[k],
            potential,
            e_min,
            e_max,
            q_list=analysis.q_list,
            n_bins=analysis.radial_bins,
            policy=analysis.tail,
            residual=residuals[k],
        )
        for k, psi in sorted(states.items())
    ]


def _baseline_key(cfg: ExperimentConfig, wells: int, points: int) -> str:
    basis = yaml.safe_dump(
        {
            "potential": {**cfg.to_dict()["potential"], "wells": wells},
            "solver": cfg.to_dict()["solver"],
            "analysis": cfg.to_dict()["analysis"],
            "wells": wells,
            "points": points,
        },
        sort_keys=True,
    )
    return hashlib.sha1(basis.encode("utf-8")).hexdigest()[:12]


def clean_baseline(cfg: ExperimentConfig, wells: int) -> BaselineCurve:
    """T/V percentile curve of the disorder-free system, cached under the output root."""
    points = points_for(cfg, wells)
    folder = Path(cfg.output.root) / BASELINE_DIR
    path = folder / f"clean-L{wells}-{_baseline_key(cfg, wells, points)}.csv"
    if path.exists():
        diags = read_diagnostics(path)
    else:
        folder.mkdir(parents=True, exist_ok=True)
        potential, _ = build_potential(cfg, wells, 0.0, 0)
        eps = solve_potential(cfg, potential)
        states = dict(enumerate(eps.states))
        diags = diagnose_eigenpairs(cfg, eps.energies, states, eps.residuals, potential)
        write_diagnostics(path, [diagnostics_row(d, "clean") for d in diags], cfg.analysis.q_list)
        logger.info("Clean baseline for L=%d written to %s", wells, path)
    thresholds = cfg.analysis.thresholds
    return build_clean_baseline(diags, thresholds.baseline_percentile, thresholds.baseline_bins)


def solve_seed(
    cfg: ExperimentConfig,
    wells: int,
    strength: float,
    seed: int,
    out_dir: Path,
    baseline: BaselineCurve,
) -> dict:
    """Solve one realization and write its files into ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    potential, realization = build_potential(cfg, wells, strength, seed)
    write_bumps(out_dir / BUMPS_NAME, realization)
    eps = solve_potential(cfg, potential)
    write_energies(out_dir / "energies.csv", eps.energies, eps.residuals)
    retained = cfg.solver.retention.select(eps.energies)
    written = write_states(out_dir, eps.states, retained)

    states = dict(enumerate(eps.states))
    diags = diagnose_eigenpairs(cfg, eps.energies, states, eps.residuals, potential)
    side = potential.grid.side_length
    label_states(diags, states, baseline, cfg.analysis.thresholds, side)
    write_diagnostics(out_dir / "diagnostics.csv", [diagnostics_row(d) for d in diags], cfg.analysis.q_list)
    return {
        "seed": int(seed),
        "n_bumps": len(realization),
        "n_states": len(eps),
        "max_residual": float(np.max(eps.residuals)),
        "solver": eps.solver_meta,
        "retained_states": len(written),
        "labels": {label: sum(d.label == label for d in diags) for label in sorted({d.label for d in diags})},
    }


# --- commands -------------------------------------------------------------------------

def solve_run(cfg: ExperimentConfig, force: bool = False) -> RunResult:
    """Solve every configured seed; an up-to-date run is skipped unless ``force``."""
    run_dir = run_dir_for(cfg)
    ledger = db.db_path(cfg.output.root)
    db.init_db(ledger)
    manifest_path = run_dir / MANIFEST_NAME
    record = db.get_run(ledger, cfg.config_hash, "solve")
    if not force and record and record[1] == "ok" and manifest_path.exists():
        logger.info("Run %s is up-to-date (%s)", cfg.config_hash, run_dir)
        return RunResult(run_dir, "up-to-date", read_manifest(manifest_path))

    if run_dir.exists():
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True)
    (run_dir / CONFIG_NAME).write_text(serialize_config(cfg), encoding="utf-8")
    wells = cfg.potential.wells
    manifest = {
        "kind": "solve",
        "config_hash": cfg.config_hash,
        "status": "running",
        "versions": versions(),
        "grid": {"wells": wells, "points_per_axis": points_for(cfg, wells)},
        "seeds": [],
    }
    start = time.perf_counter()
    try:
        baseline = clean_baseline(cfg, wells)
        for seed in cfg.disorder.seeds:
            entry = solve_seed(
                cfg, wells, cfg.disorder.strength, seed, run_dir / seed_dirname(seed), baseline
            )
            entry["path"] = seed_dirname(seed)
            manifest["seeds"].append(entry)
    except LabError as exc:
        manifest["status"] = "failed"
        manifest["error"] = str(exc)
        if isinstance(exc, ConvergenceError):
            manifest["best_residuals"] = [float(r) for r in exc.residuals]
        manifest["wall_time"] = time.perf_counter() - start
        write_manifest(manifest_path, manifest)
        db.record_run(ledger, cfg.config_hash, "solve", "failed", str(run_dir), manifest["wall_time"])
        raise
    manifest["status"] = "ok"
    manifest["wall_time"] = time.perf_counter() - start
    write_manifest(manifest_path, manifest)
    db.record_run(ledger, cfg.config_hash, "solve", "ok", str(run_dir), manifest["wall_time"])
    logger.info("Run %s finished in %.1fs: %s", cfg.config_hash, manifest["wall_time"], run_dir)
    return RunResult(run_dir, "ok", manifest)


def load_run(run_dir: str | Path) -> tuple[ExperimentConfig, dict]:
    run_dir = Path(run_dir)
    if not (run_dir / CONFIG_NAME).exists():
        raise ParameterError(f"{run_dir} is not a run directory (no {CONFIG_NAME})")
    cfg = load_config(str(run_dir / CONFIG_NAME))
    manifest = read_manifest(run_dir / MANIFEST_NAME) if (run_dir / MANIFEST_NAME).exists() else {}
    return cfg, manifest


def seed_dirs(run_dir: str | Path) -> list[Path]:
    return sorted(
        (p for p in Path(run_dir).glob("seed-*") if p.is_dir()),
        key=lambda p: int(p.name.split("-", 1)[1]),
    )


def diagnose_run(run_dir: str | Path) -> int:
    """Recompute diagnostics.csv from the stored states, bumps and energies."""
    run_dir = Path(run_dir)
    cfg, _ = load_run(run_dir)
    cfg = replace(cfg, output=replace(cfg.output, root=str(run_dir.parent)))
    wells = cfg.potential.wells
    baseline = clean_baseline(cfg, wells)
    total = 0
    for folder in seed_dirs(run_dir):
        states = read_states(folder)
        if not states:
            logger.warning("No stored states in %s; diagnostics left as they are", folder)
            continue
        grid = next(iter(states.values())).grid
        realization = read_bumps(folder / BUMPS_NAME)
        fermi = cfg.potential.fermi
        v_ext = build_lattice_potential(fermi, grid, cfg.potential.convention)
        potential = total_potential(v_ext, render_disorder(realization, grid))
        _, rows = read_table(folder / "energies.csv")
        energies = np.array([float(r["energy"]) for r in rows])
        residuals = [float(r["residual"]) for r in rows]
        diags = diagnose_eigenpairs(cfg, energies, states, residuals, potential)
        label_states(diags, states, baseline, cfg.analysis.thresholds, grid.side_length)
        # a partial store must not shrink the full table written by solve
        name = "diagnostics.csv" if len(states) == len(energies) else "diagnostics_stored.csv"
        write_diagnostics(folder / name, [diagnostics_row(d) for d in diags], cfg.analysis.q_list)
        logger.info("Rediagnosed %d stored states in %s", len(diags), folder)
        total += len(diags)
    return total


# --- level statistics -------------------------------------------------------------------

def _window_stats(energies: np.ndarray, window: dict, n_bins: int, s_max: float) -> SpectrumStats:
    if "index" in window:
        return spectrum_stats(energies, index_window=tuple(window["index"]), n_bins=n_bins, s_max=s_max)
    if "energy" in window:
        return spectrum_stats(energies, energy_window=tuple(window["energy"]), n_bins=n_bins, s_max=s_max)
    lo, hi = window["e_norm"]
    e_min, e_max = float(energies[0]), float(energies[-1])
    span = e_max - e_min
    return spectrum_stats(
        energies, energy_window=(e_min + lo * span, e_min + hi * span), n_bins=n_bins, s_max=s_max
    )


def stats_for_spectra(spectra: list[np.ndarray], window: dict, n_bins: int = 40,
                      s_max: float = 5.0) -> SpectrumStats:
    """Per-spectrum window statistics pooled into one ensemble record."""
    parts = [_window_stats(np.sort(e), window, n_bins, s_max) for e in spectra]
    return parts[0] if len(parts) == 1 else pool_stats(parts, n_bins, s_max)


def summary_row(name: str, stats: SpectrumStats) -> dict:
    summary = stats.summary()
    return {
        "window": name,
        "n_levels": summary["n_levels"],
        "n_ratios": summary["n_ratios"],
        "n_dropped": summary["n_dropped"],
        "index_lo": stats.window[0],
        "index_hi": stats.window[1],
        "mean_sym": summary["mean_sym"],
        "tv_poisson": summary["tv_poisson"],
        "tv_goe": summary["tv_goe"],
        "reference_poisson": summary["reference_poisson"],
        "reference_goe": summary["reference_goe"],
    }


def histogram_rows(name: str, stats: SpectrumStats) -> list[dict]:
    hist = stats.histogram
    poisson = reference_histogram("poisson", hist.edges)
    goe = reference_histogram("goe", hist.edges)
    return [
        {"window": name, "bin_center": c, "density": d, "poisson": p, "goe": g}
        for c, d, p, g in zip(hist.centers, hist.density, poisson.density, goe.density)
    ]


def stats_report(
    source: str | Path,
    index_window: tuple[int, int] | None = None,
    energy_window: tuple[float, float] | None = None,
    out_dir: str | Path | None = None,
    n_bins: int = 40,
    s_max: float = 5.0,
) -> SpectrumStats:
    """Spacing-ratio statistics of a run directory (seeds pooled) or an energy file."""
    source = Path(source)
    if source.is_dir():
        spectra = [read_energies(folder / "energies.csv") for folder in seed_dirs(source)]
        if not spectra:
            raise ParameterError(f"{source} holds no seed directories with energies")
    else:
        spectra = [read_energies(source)]
    if index_window is not None:
        window = {"index": list(index_window)}
        name = f"index:{index_window[0]}-{index_window[1]}"
    elif energy_window is not None:
        window = {"energy": list(energy_window)}
        name = f"energy:{energy_window[0]:g}-{energy_window[1]:g}"
    else:
        window = {"e_norm": [0.0, 1.0]}
        name = "all"
    stats = stats_for_spectra(spectra, window, n_bins, s_max)
    target = Path(out_dir) if out_dir is not None else (source if source.is_dir() else source.parent)
    target.mkdir(parents=True, exist_ok=True)
    write_table(target / "stats_summary.csv", "stats_summary", [summary_row(name, stats)])
    write_table(target / "stats_histogram.csv", "histogram", histogram_rows(name, stats))
    logger.info("Level statistics for %s written to %s", source, target)
    return stats


# --- tight-binding reduction -----------------------------------------------------------

def tb_parameters(cfg: ExperimentConfig) -> tuple[float, float]:
    e0, t = cfg.tb.e0, cfg.tb.t
    if e0 is None or t is None:
        estimated_e0, estimated_t = estimate_tb_parameters(
            cfg.potential.fermi, cfg.tb.points_per_well, method=cfg.solver.method
        )
        e0 = estimated_e0 if e0 is None else e0
        t = estimated_t if t is None else t
    return float(e0), float(t)


def tb_rows(model: TBModel, energies: np.ndarray, vectors: np.ndarray, q_list) -> list[dict]:
    e_min, e_max = float(energies[0]), float(energies[-1])
    span = e_max - e_min
    rows = []
    for k, e in enumerate(energies):
        c2 = vectors[:, k] ** 2
        row = {
            "model": "tb",
            "index": k,
            "energy": float(e),
            "e_norm": (float(e) - e_min) / span if span > 0 else 0.0,
            "ipr2": float(np.sum(c2 * c2)),
        }
        for q in q_list:
            row[f"ipr_q{float(q):g}"] = float(np.sum(c2 ** q))
        rows.append(row)
    return rows


def tb_run(cfg: ExperimentConfig, compare: str | Path | None = None) -> Path:
    """TB reduction of every seed's realization, with an optional continuum comparison."""
    out = run_dir_for(cfg, "tb")
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_NAME).write_text(serialize_config(cfg), encoding="utf-8")
    e0, t = tb_parameters(cfg)
    fermi = cfg.potential.fermi
    manifest = {"kind": "tb", "config_hash": cfg.config_hash, "versions": versions(),
                "e0": e0, "t": t, "seeds": []}
    for seed in cfg.disorder.seeds:
        folder = out / seed_dirname(seed)
        folder.mkdir(exist_ok=True)
        realization = sample_disorder(
            cfg.disorder.density,
            cfg.disorder.amp_mean(cfg.potential.v0),
            cfg.disorder.width,
            seed,
            fermi.side_length,
            cfg.disorder.amplitude_dist,
            cfg.disorder.width_dist,
        )
        model = reduce_to_tb(fermi, realization, e0, t)
        energies, vectors = tb_spectrum(model)
        write_diagnostics(folder / "tb_spectrum.csv", tb_rows(model, energies, vectors, cfg.analysis.q_list),
                          cfg.analysis.q_list)
        write_table(
            folder / "tb_onsite.csv",
            "tb_onsite",
            [{"i": i, "j": j, "onsite": model.onsite[i, j]} for i in range(model.size) for j in range(model.size)],
        )
        entry = {"seed": int(seed), "path": folder.name, "n_sites": model.n_sites,
                 "crowded_wells": [list(w) for w in model.crowded_wells]}
        if len(energies) >= 3:
            stats = spectrum_stats(energies, n_bins=cfg.analysis.hist_bins, s_max=cfg.analysis.hist_s_max)
            write_table(folder / "stats_summary.csv", "stats_summary", [summary_row("all", stats)])
            entry["mean_sym"] = stats.mean_sym
        if compare is not None:
            entry["compare"] = _compare_seed(model, energies, vectors, Path(compare), seed, fermi)
        manifest["seeds"].append(entry)
    write_manifest(out / MANIFEST_NAME, manifest)
    logger.info("Tight-binding reduction (e0=%.6f, t=%.3e) written to %s", e0, t, out)
    return out


def _compare_seed(model, energies, vectors, run_dir: Path, seed: int, fermi) -> dict:
    folder = run_dir / seed_dirname(seed)
    if not folder.is_dir():
        raise ParameterError(f"{run_dir} has no results for seed {seed}")
    states = read_states(folder)
    cont_energies = read_energies(folder / "energies.csv")
    indices = sorted(states)
    # occupations need the lowest states without gaps
    contiguous = [k for n, k in enumerate(indices) if k == n]
    if len(contiguous) < 3:
        raise ParameterError(f"{folder} keeps fewer than 3 lowest states; rerun with retention mode 'all'")
    report = compare_with_continuum(
        model, energies, vectors, cont_energies[contiguous], [states[k] for k in contiguous], fermi
    )
    logger.info("Seed %d: Spearman rho=%.3f over %d matched states", seed, report["spearman_rho"], report["n_matched"])
    return report
