"""CSV tables, run manifests and eigenpair files.

Every CSV starts with a ``# <schema> v<version>`` line followed by the column
header; ``check_table`` validates a file against ``SCHEMAS``. Floats are
written with ``repr`` so they round-trip exactly; absent values are empty cells.
"""

import csv
import logging
import platform
from pathlib import Path

import numpy as np
import scipy
import yaml

from errors import ParameterError
from grid import Wavefunction, read_field, write_field
from observables import StateDiagnostics
from potential import BUMPS_FORMAT

logger = logging.getLogger(__name__)

TABLE_VERSION = 1
MANIFEST_VERSION = 1
FIELD_FORMAT = "LLF1"
STATES_DIR = "states"
STATE_PATTERN = "state_{:05d}.llf"

# column -> type code; a trailing "?" allows an empty cell
SCHEMAS: dict[str, dict[str, str]] = {
    "energies": {"index": "i", "energy": "f", "residual": "f"},
    "diagnostics": {
        "model": "s",
        "index": "i",
        "energy": "f",
        "e_norm": "f",
        "ipr2": "f",
        "t_exp": "f?",
        "v_exp": "f?",
        "tv_ratio": "f?",
        "lambda_db": "f?",
        "xi_tail": "f?",
        "xi_envelope": "f?",
        "tail_fit_quality": "f?",
        "tail_reason": "s?",
        "consistency": "f?",
        "anisotropy": "f?",
        "centroid_x": "f?",
        "centroid_y": "f?",
        "residual": "f?",
        "scar_score": "f?",
        "label": "s?",
    },
    "histogram": {"window": "s", "bin_center": "f", "density": "f", "poisson": "f", "goe": "f"},
    "stats_summary": {
        "window": "s",
        "n_levels": "i",
        "n_ratios": "i",
        "n_dropped": "i",
        "index_lo": "i",
        "index_hi": "i",
        "mean_sym": "f",
        "tv_poisson": "f",
        "tv_goe": "f",
        "reference_poisson": "f",
        "reference_goe": "f",
    },
    "fig1_map": {
        "size": "i",
        "strength": "f",
        "e_bin_lo": "f",
        "e_bin_hi": "f",
        "n_states": "i",
        "median_log10_ipr2": "f?",
        "n_anderson": "i",
        "n_scarred": "i",
        "n_delocalized": "i",
        "n_ambiguous": "i",
    },
    "fig2_scaling": {
        "class": "s",
        "strength": "f",
        "size": "i",
        "q": "f",
        "mean_ipr": "f",
        "n_states": "i",
    },
    "fig2_fits": {
        "class": "s",
        "strength": "f",
        "q": "f",
        "slope": "f",
        "dim_est": "f",
        "stderr": "f",
        "n_sizes": "i",
    },
    "fig3_stats": {
        "size": "i",
        "strength": "f",
        "window": "s",
        "n_seeds": "i",
        "n_levels": "i",
        "n_ratios": "i",
        "mean_sym": "f",
        "tv_poisson": "f",
        "tv_goe": "f",
    },
    "fig4_tv": {
        "size": "i",
        "strength": "f",
        "seed": "i",
        "index": "i",
        "energy": "f",
        "e_norm": "f",
        "tv_ratio": "f?",
        "lambda_db": "f?",
        "wavelength_ok": "i",
        "baseline": "f?",
        "scar_score": "f?",
        "label": "s",
    },
    "ipr_energy": {
        "size": "i",
        "strength": "f",
        "seed": "i",
        "index": "i",
        "energy": "f",
        "e_norm": "f",
        "ipr2": "f",
    },
    "tb_onsite": {"i": "i", "j": "i", "onsite": "f"},
}

# diagnostics carries one ipr_q<q> column per configured order
EXTRA_PREFIX = {"diagnostics": "ipr_q"}


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return "" if np.isnan(value) else repr(value)
    return str(value)


def write_table(path: str | Path, schema: str, rows: list[dict], extra_columns: list[str] = ()) -> Path:
    if schema not in SCHEMAS:
        raise ParameterError(f"unknown table schema {schema!r}")
    path = Path(path)
    columns = list(SCHEMAS[schema]) + list(extra_columns)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write(f"# {schema} v{TABLE_VERSION}\n")
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row.get(col)) for col in columns])
    logger.debug("Wrote %d rows to %s", len(rows), path)
    return path


def _parse_header(line: str, path) -> tuple[str, int]:
    parts = line.lstrip("#").split()
    if not line.startswith("#") or len(parts) != 2 or not parts[1].startswith("v"):
        raise ParameterError(f"{path}: missing '# <schema> v<version>' line")
    try:
        return parts[0], int(parts[1][1:])
    except ValueError as exc:
        raise ParameterError(f"{path}: bad version tag {parts[1]!r}") from exc


def read_table(path: str | Path) -> tuple[str, list[dict]]:
    """Schema name and rows as dicts of strings (absent values are '')."""
    with open(path, "r", encoding="utf-8", newline="") as handle:
        schema, _ = _parse_header(handle.readline(), path)
        rows = list(csv.DictReader(handle))
    return schema, rows


def _check_value(code: str, text: str) -> bool:
    optional = code.endswith("?")
    if text == "":
        return optional
    kind = code.rstrip("?")
    try:
        if kind == "i":
            int(text)
        elif kind == "f":
            float(text)
    except ValueError:
        return False
    return True


def check_table(path: str | Path) -> list[str]:
    """Problems found in a CSV under the strict schema; empty when it conforms."""
    problems: list[str] = []
    with open(path, "r", encoding="utf-8", newline="") as handle:
        try:
            schema, version = _parse_header(handle.readline(), path)
        except ParameterError as exc:
            return [str(exc)]
        if schema not in SCHEMAS:
            return [f"unknown schema {schema!r}"]
        if version != TABLE_VERSION:
            problems.append(f"version {version} != supported {TABLE_VERSION}")
        reader = csv.reader(handle)
        header = next(reader, None)
        expected = list(SCHEMAS[schema])
        if header is None or header[: len(expected)] != expected:
            return problems + [f"header {header} does not start with {expected}"]
        extras = header[len(expected):]
        prefix = EXTRA_PREFIX.get(schema)
        for col in extras:
            if prefix is None or not col.startswith(prefix):
                problems.append(f"unexpected column {col!r}")
        codes = [SCHEMAS[schema][c] for c in expected] + ["f?"] * len(extras)
        for lineno, row in enumerate(reader, start=3):
            if len(row) != len(header):
                problems.append(f"line {lineno}: {len(row)} cells, expected {len(header)}")
                continue
            for col, code, text in zip(header, codes, row):
                if not _check_value(code, text):
                    problems.append(f"line {lineno}: column {col!r} has bad value {text!r}")
    return problems


# --- domain rows ------------------------------------------------------------------

def q_column(q: float) -> str:
    return f"ipr_q{q:g}"


def diagnostics_row(diag: StateDiagnostics, model: str = "continuum") -> dict:
    row = {
        "model": model,
        "index": diag.index,
        "energy": diag.energy,
        "e_norm": diag.e_norm,
        "ipr2": diag.ipr2,
        "t_exp": diag.t_exp,
        "v_exp": diag.v_exp,
        "tv_ratio": diag.tv_ratio,
        "lambda_db": diag.lambda_db,
        "xi_tail": diag.xi_tail,
        "xi_envelope": diag.xi_envelope,
        "tail_fit_quality": diag.tail_fit_quality,
        "tail_reason": diag.tail_reason or None,
        "consistency": diag.consistency,
        "anisotropy": diag.anisotropy,
        "centroid_x": diag.centroid[0],
        "centroid_y": diag.centroid[1],
        "residual": diag.residual,
        "scar_score": diag.scar_score,
        "label": diag.label,
    }
    for q, value in diag.ipr_q.items():
        row[q_column(q)] = value
    return row


def write_diagnostics(path: str | Path, rows: list[dict], q_list) -> Path:
    return write_table(path, "diagnostics", rows, [q_column(float(q)) for q in q_list])


def _opt_float(text: str) -> float | None:
    return float(text) if text != "" else None


def read_diagnostics(path: str | Path) -> list[StateDiagnostics]:
    schema, rows = read_table(path)
    if schema != "diagnostics":
        raise ParameterError(f"{path}: expected a diagnostics table, found {schema!r}")
    out = []
    for row in rows:
        ipr_q = {
            float(col[len("ipr_q"):]): float(val)
            for col, val in row.items()
            if col.startswith("ipr_q") and val != ""
        }
        out.append(
            StateDiagnostics(
                index=int(row["index"]),
                energy=float(row["energy"]),
                e_norm=float(row["e_norm"]),
                ipr2=float(row["ipr2"]),
                ipr_q=ipr_q,
                t_exp=_opt_float(row["t_exp"]),
                v_exp=_opt_float(row["v_exp"]),
                tv_ratio=_opt_float(row["tv_ratio"]),
                lambda_db=_opt_float(row["lambda_db"]),
                xi_tail=_opt_float(row["xi_tail"]),
                xi_envelope=_opt_float(row["xi_envelope"]),
                tail_fit_quality=_opt_float(row["tail_fit_quality"]),
                tail_reason=row["tail_reason"],
                consistency=_opt_float(row["consistency"]),
                anisotropy=_opt_float(row["anisotropy"]) or 0.0,
                centroid=(_opt_float(row["centroid_x"]) or 0.0, _opt_float(row["centroid_y"]) or 0.0),
                residual=_opt_float(row["residual"]) or 0.0,
                scar_score=_opt_float(row["scar_score"]),
                label=row["label"] or None,
            )
        )
    return out


def write_energies(path: str | Path, energies, residuals) -> Path:
    rows = [
        {"index": k, "energy": float(e), "residual": float(r)}
        for k, (e, r) in enumerate(zip(energies, residuals))
    ]
    return write_table(path, "energies", rows)


def read_energies(path: str | Path) -> np.ndarray:
    """Energies from an ``energies`` table, or from a plain one-value-per-line file."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as handle:
        first = handle.readline()
    if first.startswith("# energies"):
        _, rows = read_table(path)
        return np.array([float(row["energy"]) for row in rows])
    values = np.loadtxt(path, comments="#", ndmin=1)
    return np.asarray(values, dtype=np.float64).ravel()


# --- eigenpair files ----------------------------------------------------------------

def state_path(run_dir: str | Path, index: int) -> Path:
    return Path(run_dir) / STATES_DIR / STATE_PATTERN.format(index)


def write_states(run_dir: str | Path, states: list[Wavefunction], retained: list[int]) -> list[str]:
    target = Path(run_dir) / STATES_DIR
    target.mkdir(parents=True, exist_ok=True)
    written = []
    for k in retained:
        written.append(str(write_field(state_path(run_dir, k), states[k]).relative_to(run_dir)))
    return written


def read_states(run_dir: str | Path) -> dict[int, Wavefunction]:
    folder = Path(run_dir) / STATES_DIR
    states = {}
    for path in sorted(folder.glob("state_*.llf")):
        states[int(path.stem.split("_")[1])] = read_field(path, Wavefunction)
    return states


# --- manifests ----------------------------------------------------------------------

def versions() -> dict:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "yaml": yaml.__version__,
        "manifest": MANIFEST_VERSION,
        "tables": TABLE_VERSION,
        "field": FIELD_FORMAT,
    }


def write_manifest(path: str | Path, data: dict) -> Path:
    path = Path(path)
    body = {"format": f"manifest v{MANIFEST_VERSION}", **data}
    tmp = path.with_suffix(".tmp")
    tmp.write_text(yaml.safe_dump(body, sort_keys=False, allow_unicode=True), encoding="utf-8")
    tmp.replace(path)
    return path


def read_manifest(path: str | Path) -> dict:
    with open(path, "r", encoding="utf-8") as handle:
        return yaml.safe_load(handle) or {}


def format_versions() -> dict:
    """Everything ``schema`` prints: table versions and the binary/text formats."""
    return {
        "tables": {name: TABLE_VERSION for name in SCHEMAS},
        "field": FIELD_FORMAT,
        "bumps": BUMPS_FORMAT,
        "manifest": MANIFEST_VERSION,
    }
