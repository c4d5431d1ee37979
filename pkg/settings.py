"""Experiment configuration: YAML sections merged over ``config/defaults.yaml``.

Every key a user may set is present in the defaults file, which doubles as the
schema: a user value must match the type of its default. The canonical form is
the fully-defaulted config dumped with sorted keys; its SHA-1 names the run.
"""

import copy
import hashlib
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache

import numpy as np
import yaml

from errors import ConfigError
from observables import TailWindowPolicy
from potential import AMPLITUDE_DISTRIBUTIONS, CONVENTIONS, WIDTH_DISTRIBUTIONS, FermiParams
from solver import METHODS

logger = logging.getLogger(__name__)

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "config")
DEFAULTS_PATH = os.path.join(CONFIG_DIR, "defaults.yaml")

REQUIRED_KEYS = ("potential.r0", "potential.d", "potential.v0", "potential.a", "potential.wells")

# keys whose default is null: value type when set
NULLABLE = {
    "solver.points_per_axis": int,
    "solver.e_target": float,
    "solver.retention.e_lo": float,
    "solver.retention.e_hi": float,
    "analysis.tail.max_xi": float,
    "tb.e0": float,
    "tb.t": float,
    "output.workers": int,
}

CHOICES = {
    "potential.convention": CONVENTIONS,
    "disorder.amplitude_dist": AMPLITUDE_DISTRIBUTIONS,
    "disorder.width_dist": WIDTH_DISTRIBUTIONS,
    "solver.method": METHODS,
    "solver.retention.mode": ("all", "window", "every", "none"),
}

# left out of the hash: where results go does not change what they are
HASH_EXCLUDED = ("output",)

HASH_LENGTH = 12


@lru_cache(maxsize=None)
def _load_defaults() -> dict:
    with open(DEFAULTS_PATH, "r", encoding="utf-8") as handle:
        return yaml.safe_load(handle) or {}


def load_defaults() -> dict:
    return copy.deepcopy(_load_defaults())


# --- typed coercion ---------------------------------------------------------------

def _type_name(value) -> str:
    return type(value).__name__


def _as_float(key: str, value) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{key}: expected a number, got {_type_name(value)} {value!r}")
    value = float(value)
    if not np.isfinite(value):
        raise ConfigError(f"{key}: must be finite, got {value}")
    return value


def _as_int(key: str, value) -> int:
    if isinstance(value, bool):
        raise ConfigError(f"{key}: expected an integer, got bool")
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if not isinstance(value, int):
        raise ConfigError(f"{key}: expected an integer, got {_type_name(value)} {value!r}")
    return value


def _as_scalar(key: str, default, value):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        return _as_int(key, value)
    if isinstance(default, float):
        return _as_float(key, value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {_type_name(value)} {value!r}")
        if key in CHOICES and value not in CHOICES[key]:
            raise ConfigError(f"{key}: {value!r} is not one of {', '.join(CHOICES[key])}")
        return value
    raise ConfigError(f"{key}: unsupported default type {_type_name(default)}")


def _as_list(key: str, default: list, value) -> list:
    if not isinstance(value, list):
        raise ConfigError(f"{key}: expected a list, got {_type_name(value)} {value!r}")
    if not default:
        return list(value)
    return [_as_scalar(f"{key}[{k}]", default[0], item) for k, item in enumerate(value)]


def _points_by_size(key: str, value) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(f"{key}: expected a mapping of size -> points_per_axis")
    return {
        _as_int(f"{key} key", size): _as_int(f"{key}.{size}", points)
        for size, points in value.items()
    }


def _stats_windows(key: str, value) -> list[dict]:
    if not isinstance(value, list) or not value:
        raise ConfigError(f"{key}: expected a non-empty list of windows")
    windows = []
    for k, item in enumerate(value):
        where = f"{key}[{k}]"
        if not isinstance(item, dict) or not isinstance(item.get("name"), str):
            raise ConfigError(f"{where}: each window needs a string 'name'")
        kinds = [kind for kind in ("e_norm", "energy", "index") if kind in item]
        extra = set(item) - {"name", "e_norm", "energy", "index"}
        if len(kinds) != 1 or extra:
            raise ConfigError(f"{where}: give exactly one of e_norm, energy or index")
        kind = kinds[0]
        bounds = item[kind]
        if not isinstance(bounds, list) or len(bounds) != 2:
            raise ConfigError(f"{where}.{kind}: expected [lo, hi]")
        cast = _as_int if kind == "index" else _as_float
        lo, hi = (cast(f"{where}.{kind}", b) for b in bounds)
        if not lo < hi:
            raise ConfigError(f"{where}.{kind}: lower bound must be below upper bound")
        windows.append({"name": item["name"], kind: [lo, hi]})
    return windows


FREEFORM = {
    "solver.points_by_size": _points_by_size,
    "analysis.stats_windows": _stats_windows,
}


def _merge(defaults: dict, given, prefix: str = "") -> dict:
    if not isinstance(given, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected a mapping")
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown key {prefix}{unknown[0]}")
    merged = {}
    for key, default in defaults.items():
        dotted = f"{prefix}{key}"
        if key not in given:
            merged[key] = copy.deepcopy(default)
            continue
        value = given[key]
        if dotted in FREEFORM:
            merged[key] = FREEFORM[dotted](dotted, value)
        elif dotted in NULLABLE:
            if value is None:
                merged[key] = None
            elif NULLABLE[dotted] is int:
                merged[key] = _as_int(dotted, value)
            else:
                merged[key] = _as_float(dotted, value)
        elif value is None:
            raise ConfigError(f"{dotted}: may not be null")
        elif isinstance(default, dict):
            merged[key] = _merge(default, value, f"{dotted}.")
        elif isinstance(default, list):
            merged[key] = _as_list(dotted, default, value)
        else:
            merged[key] = _as_scalar(dotted, default, value)
    return merged


def _check_required(raw: dict) -> None:
    for dotted in REQUIRED_KEYS:
        section, key = dotted.split(".")
        block = raw.get(section)
        if not isinstance(block, dict) or key not in block:
            raise ConfigError(f"missing required key {dotted}")


# --- typed sections ---------------------------------------------------------------

@dataclass(frozen=True)
class PotentialSection:
    r0: float
    d: float
    v0: float
    a: float
    wells: int
    convention: str = "wells_down"

    @property
    def fermi(self) -> FermiParams:
        return FermiParams(self.r0, self.d, self.v0, self.a, self.wells)

    def with_wells(self, wells: int) -> "PotentialSection":
        return replace(self, wells=int(wells))


@dataclass(frozen=True)
class DisorderSection:
    density: float
    strength: float
    width: float
    amplitude_dist: str
    width_dist: str
    seeds: list[int] = field(default_factory=lambda: [0])

    def amp_mean(self, v0: float) -> float:
        return self.strength * v0


@dataclass(frozen=True)
class RetentionPolicy:
    mode: str = "all"
    every: int = 1
    e_lo: float | None = None
    e_hi: float | None = None

    def select(self, energies) -> list[int]:
        """Indices of states whose fields are written to disk."""
        n = len(energies)
        if self.mode == "none":
            return []
        if self.mode == "every":
            return list(range(0, n, max(self.every, 1)))
        if self.mode == "window":
            lo = -np.inf if self.e_lo is None else self.e_lo
            hi = np.inf if self.e_hi is None else self.e_hi
            return [k for k, e in enumerate(energies) if lo <= e <= hi]
        return list(range(n))


@dataclass(frozen=True)
class SolverSection:
    method: str
    n_states: int
    tol: float
    max_iter: int
    attempts: int
    itp_time_step: float
    seed: int
    points_per_axis: int | None
    points_by_size: dict[int, int]
    e_target: float | None
    retention: RetentionPolicy


@dataclass(frozen=True)
class ClassThresholds:
    consistency_lo: float = 0.5
    consistency_hi: float = 2.0
    xi_fraction: float = 1.0 / 3.0
    scar_threshold: float = 0.5
    delocalized_factor: float = 3.0
    w_kinetic: float = 0.5
    w_anisotropy: float = 0.5
    baseline_percentile: float = 90.0
    baseline_bins: int = 20


@dataclass(frozen=True)
class AnalysisSection:
    q_list: list[float]
    hist_bins: int
    hist_s_max: float
    radial_bins: int
    map_bins: int
    tail: TailWindowPolicy
    thresholds: ClassThresholds
    stats_windows: list[dict]


@dataclass(frozen=True)
class SweepSection:
    sizes: list[int]
    strengths: list[float]


@dataclass(frozen=True)
class TBSection:
    e0: float | None = None
    t: float | None = None
    points_per_well: int = 96


@dataclass(frozen=True)
class OutputSection:
    root: str = "runs"
    workers: int | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    potential: PotentialSection
    disorder: DisorderSection
    solver: SolverSection
    analysis: AnalysisSection
    sweep: SweepSection
    tb: TBSection
    output: OutputSection

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical(self, for_hash: bool = False) -> str:
        data = self.to_dict()
        if for_hash:
            for section in HASH_EXCLUDED:
                data.pop(section, None)
        return yaml.safe_dump(data, sort_keys=True, default_flow_style=False, allow_unicode=True)

    @property
    def config_hash(self) -> str:
        return hashlib.sha1(self.canonical(for_hash=True).encode("utf-8")).hexdigest()[:HASH_LENGTH]


def _validate(cfg: dict) -> None:
    positive = {
        "potential": ("r0", "d", "v0", "a"),
        "disorder": ("width",),
        "solver": ("tol", "itp_time_step"),
        "analysis": ("hist_s_max",),
    }
    for section, keys in positive.items():
        for key in keys:
            if cfg[section][key] <= 0:
                raise ConfigError(f"{section}.{key}: must be positive, got {cfg[section][key]}")
    for section, key in (("disorder", "density"), ("disorder", "strength")):
        if cfg[section][key] < 0:
            raise ConfigError(f"{section}.{key}: must be non-negative")
    for section, key in (("potential", "wells"), ("solver", "n_states"), ("solver", "max_iter"),
                         ("solver", "attempts"), ("analysis", "hist_bins"), ("analysis", "map_bins"),
                         ("tb", "points_per_well")):
        if cfg[section][key] < 1:
            raise ConfigError(f"{section}.{key}: must be >= 1")
    if cfg["analysis"]["radial_bins"] < 8:
        raise ConfigError("analysis.radial_bins: must be >= 8")
    if any(q < 2 for q in cfg["analysis"]["q_list"]):
        raise ConfigError("analysis.q_list: every order must be >= 2")
    if not cfg["disorder"]["seeds"]:
        raise ConfigError("disorder.seeds: empty seed list")
    if not cfg["sweep"]["sizes"]:
        raise ConfigError("sweep.sizes: empty sweep axis")
    if not cfg["sweep"]["strengths"]:
        raise ConfigError("sweep.strengths: empty sweep axis")
    if any(size < 1 for size in cfg["sweep"]["sizes"]):
        raise ConfigError("sweep.sizes: sizes must be >= 1")
    if any(s < 0 for s in cfg["sweep"]["strengths"]):
        raise ConfigError("sweep.strengths: strengths must be non-negative")


def build_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping of sections")
    _check_required(raw)
    cfg = _merge(load_defaults(), raw)
    _validate(cfg)
    solver = dict(cfg["solver"])
    solver["retention"] = RetentionPolicy(**solver["retention"])
    analysis = dict(cfg["analysis"])
    analysis["tail"] = TailWindowPolicy(**analysis["tail"])
    analysis["thresholds"] = ClassThresholds(**analysis["thresholds"])
    return ExperimentConfig(
        potential=PotentialSection(**cfg["potential"]),
        disorder=DisorderSection(**cfg["disorder"]),
        solver=SolverSection(**solver),
        analysis=AnalysisSection(**analysis),
        sweep=SweepSection(**cfg["sweep"]),
        tb=TBSection(**cfg["tb"]),
        output=OutputSection(**cfg["output"]),
    )


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}:{mark.column + 1}" if mark is not None else source
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"{where}: {problem}") from exc
    if raw is None:
        raise ConfigError(f"{source}: empty config")
    try:
        return build_config(raw)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            text = handle.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, source=str(path))


def serialize_config(cfg: ExperimentConfig) -> str:
    return cfg.canonical()


def apply_env_overrides(cfg: ExperimentConfig) -> ExperimentConfig:
    """LOCLAB_OUTPUT_ROOT and LOCLAB_THREADS win over the file's output section."""
    output = cfg.output
    root = os.getenv("LOCLAB_OUTPUT_ROOT")
    if root:
        output = replace(output, root=root)
    threads = os.getenv("LOCLAB_THREADS")
    if threads:
        if not threads.strip().isdigit() or int(threads) < 1:
            raise ConfigError(f"LOCLAB_THREADS must be a positive integer, got {threads!r}")
        cap = int(threads)
        workers = cap if output.workers is None else min(output.workers, cap)
        output = replace(output, workers=workers)
    if output is cfg.output:
        return cfg
    logger.debug("Environment overrides applied: root=%s workers=%s", output.root, output.workers)
    return replace(cfg, output=output)


def with_overrides(cfg: ExperimentConfig, *, seeds: list[int] | None = None,
                   root: str | None = None, workers: int | None = None) -> ExperimentConfig:
    """Command-line flags layered over the loaded config."""
    if seeds is not None:
        if not seeds:
            raise ConfigError("--seeds: empty seed list")
        cfg = replace(cfg, disorder=replace(cfg.disorder, seeds=list(seeds)))
    if root is not None:
        cfg = replace(cfg, output=replace(cfg.output, root=root))
    if workers is not None:
        if workers < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = replace(cfg, output=replace(cfg.output, workers=workers))
    return cfg
