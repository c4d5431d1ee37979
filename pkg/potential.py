"""Clean Fermi-well lattice plus seeded Gaussian-bump disorder."""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from errors import GridMismatchError, ParameterError
from grid import Grid2D, ScalarField, require_same_grid

logger = logging.getLogger(__name__)

CONVENTIONS = ("wells_down", "raw")
AMPLITUDE_DISTRIBUTIONS = ("uniform", "constant", "half_normal")
WIDTH_DISTRIBUTIONS = ("constant", "uniform")

# Bumps contribute only inside this many widths of their centre (e^-18 ~ 1.5e-8).
RENDER_CUTOFF = 6.0

BUMPS_FORMAT = "bumps v1"


@dataclass(frozen=True)
class FermiParams:
    r0: float = 0.8
    d: float = 0.03
    v0: float = 20.0
    a: float = 2.0
    wells: int = 1

    def __post_init__(self) -> None:
        for name in ("r0", "d", "v0", "a"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ParameterError(f"FermiParams.{name} must be positive, got {value}")
        if int(self.wells) != self.wells or self.wells < 1:
            raise ParameterError(f"FermiParams.wells must be an integer >= 1, got {self.wells}")

    @property
    def side_length(self) -> float:
        return self.a * self.wells

    def well_centers(self) -> np.ndarray:
        """(L², 2) array of centres ((i+½)a, (j+½)a), i-major."""
        offsets = (np.arange(self.wells) + 0.5) * self.a
        cx, cy = np.meshgrid(offsets, offsets, indexing="ij")
        return np.column_stack([cx.ravel(), cy.ravel()])


def fermi_well_value(params: FermiParams, r):
    """Symmetrized Fermi profile V0·coth(r0/2d)·sinh(r0/d)/(cosh(r/d)+cosh(r0/d)).

    Numerator and denominator are both scaled by 2·exp(-max(r/d, r0/d)) so no
    exponential ever has a positive argument; cosh overflows f64 near 710.
    """
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0):
        raise ParameterError("distance from well centre must be non-negative")
    u = r / params.d
    u0 = params.r0 / params.d
    m = np.maximum(u, u0)
    numerator = np.exp(u0 - m) - np.exp(-u0 - m)
    denominator = np.exp(u - m) + np.exp(-u - m) + np.exp(u0 - m) + np.exp(-u0 - m)
    coth = 1.0 / np.tanh(u0 / 2.0)
    value = params.v0 * coth * numerator / denominator
    return float(value) if value.ndim == 0 else value


def _check_geometry(params: FermiParams, grid: Grid2D) -> None:
    if not np.isclose(grid.side_length, params.side_length, rtol=1e-12, atol=0.0):
        raise GridMismatchError(
            f"grid side {grid.side_length} != a*L = {params.a}*{params.wells}"
        )


def build_lattice_potential(
    params: FermiParams, grid: Grid2D, convention: str = "wells_down"
) -> ScalarField:
    """V_ext on the grid: wells of depth V0 below a barrier plateau at V0.

    ``convention="raw"`` returns the plain sum of Fermi profiles instead.
    """
    if convention not in CONVENTIONS:
        raise ParameterError(f"unknown potential convention {convention!r}")
    _check_geometry(params, grid)
    x, y = grid.mesh()
    x = x - grid.origin[0]
    y = y - grid.origin[1]
    wells = np.zeros(grid.shape)
    for cx, cy in params.well_centers():
        wells += fermi_well_value(params, np.hypot(x - cx, y - cy))
    values = params.v0 - wells if convention == "wells_down" else wells
    return ScalarField(grid, values)


# --- disorder -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DisorderRealization:
    positions: np.ndarray = field(repr=False)
    amplitudes: np.ndarray = field(repr=False)
    widths: np.ndarray = field(repr=False)
    seed: int
    density: float
    amp_mean: float
    side_length: float

    def __post_init__(self) -> None:
        positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        amplitudes = np.asarray(self.amplitudes, dtype=np.float64).ravel()
        widths = np.asarray(self.widths, dtype=np.float64).ravel()
        if not (len(positions) == len(amplitudes) == len(widths)):
            raise ParameterError("bump arrays have inconsistent lengths")
        if np.any(widths <= 0):
            raise ParameterError("bump widths must be positive")
        for arr in (positions, amplitudes, widths):
            arr.flags.writeable = False
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "amplitudes", amplitudes)
        object.__setattr__(self, "widths", widths)

    def __len__(self) -> int:
        return len(self.amplitudes)

    def same_bumps(self, other: "DisorderRealization") -> bool:
        return (
            np.array_equal(self.positions, other.positions)
            and np.array_equal(self.amplitudes, other.amplitudes)
            and np.array_equal(self.widths, other.widths)
        )


def bump_count(density: float, side_length: float) -> int:
    # round half up; Python's round() would bank
    return int(np.floor(density * side_length * side_length + 0.5))


def sample_disorder(
    density: float,
    amp_mean: float,
    width: float,
    seed: int,
    side_length: float,
    amplitude_dist: str = "uniform",
    width_dist: str = "constant",
) -> DisorderRealization:
    """Draw bump positions, amplitudes and widths from one seeded stream.

    Draw order is fixed (positions, amplitudes, widths) so a seed always maps
    to the same list.
    """
    if density < 0 or amp_mean < 0:
        raise ParameterError("density and amp_mean must be non-negative")
    if width <= 0:
        raise ParameterError("bump width must be positive")
    if amplitude_dist not in AMPLITUDE_DISTRIBUTIONS:
        raise ParameterError(f"unknown amplitude distribution {amplitude_dist!r}")
    if width_dist not in WIDTH_DISTRIBUTIONS:
        raise ParameterError(f"unknown width distribution {width_dist!r}")

    n = bump_count(density, side_length)
    rng = np.random.default_rng(int(seed))
    positions = rng.uniform(0.0, side_length, size=(n, 2))
    # uniform() is half-open; keep bumps off the wall itself
    positions[positions == 0.0] = 0.5 * side_length
    if amplitude_dist == "uniform":
        amplitudes = rng.uniform(0.0, 2.0 * amp_mean, size=n)
    elif amplitude_dist == "half_normal":
        amplitudes = np.abs(rng.normal(0.0, amp_mean * np.sqrt(np.pi / 2.0), size=n))
    else:
        amplitudes = np.full(n, float(amp_mean))
    if width_dist == "uniform":
        widths = rng.uniform(0.5 * width, 1.5 * width, size=n)
    else:
        widths = np.full(n, float(width))
    logger.debug("Sampled %d bumps (seed=%d, rho=%.3f)", n, seed, density)
    return DisorderRealization(
        positions, amplitudes, widths, int(seed), float(density), float(amp_mean), float(side_length)
    )


def render_disorder(real: DisorderRealization, grid: Grid2D) -> ScalarField:
    """Sum of Gaussian bumps, each evaluated only within 6σ of its centre."""
    if not np.isclose(real.side_length, grid.side_length, rtol=1e-12, atol=0.0):
        raise GridMismatchError(
            f"realization side {real.side_length} != grid side {grid.side_length}"
        )
    values = np.zeros(grid.shape)
    h = grid.spacing
    n = grid.points_per_axis
    xs = grid.axis(0) - grid.origin[0]
    ys = grid.axis(1) - grid.origin[1]
    for (bx, by), amp, sigma in zip(real.positions, real.amplitudes, real.widths):
        if amp == 0.0:
            continue
        reach = RENDER_CUTOFF * sigma
        i_lo = max(int(np.floor((bx - reach) / h)) - 1, 0)
        i_hi = min(int(np.ceil((bx + reach) / h)), n)
        j_lo = max(int(np.floor((by - reach) / h)) - 1, 0)
        j_hi = min(int(np.ceil((by + reach) / h)), n)
        if i_lo >= i_hi or j_lo >= j_hi:
            continue
        dx2 = (xs[i_lo:i_hi] - bx) ** 2
        dy2 = (ys[j_lo:j_hi] - by) ** 2
        values[i_lo:i_hi, j_lo:j_hi] += amp * np.exp(
            -(dx2[:, None] + dy2[None, :]) / (2.0 * sigma * sigma)
        )
    return ScalarField(grid, values)


def total_potential(v_ext: ScalarField, v_imp: ScalarField) -> ScalarField:
    grid = require_same_grid(v_ext, v_imp)
    return ScalarField(grid, v_ext.values + v_imp.values)


# --- bump files -------------------------------------------------------------------

def write_bumps(path: str | Path, real: DisorderRealization) -> Path:
    path = Path(path)
    lines = [
        f"# {BUMPS_FORMAT}",
        f"# seed={real.seed} rho={real.density!r} amp_mean={real.amp_mean!r} "
        f"side_length={real.side_length!r}",
        "# x y A sigma",
    ]
    for (x, y), amp, sigma in zip(real.positions, real.amplitudes, real.widths):
        lines.append(" ".join(repr(float(v)) for v in (x, y, amp, sigma)))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_bumps(path: str | Path) -> DisorderRealization:
    meta: dict[str, str] = {}
    rows: list[list[float]] = []
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for token in line[1:].split():
                    if "=" in token:
                        key, value = token.split("=", 1)
                        meta[key] = value
                continue
            rows.append([float(tok) for tok in line.split()])
    try:
        seed = int(meta["seed"])
        density = float(meta["rho"])
        amp_mean = float(meta["amp_mean"])
        side = float(meta["side_length"])
    except KeyError as exc:
        raise ParameterError(f"{path}: bump header lacks {exc.args[0]}") from exc
    data = np.array(rows, dtype=np.float64).reshape(-1, 4)
    return DisorderRealization(data[:, :2], data[:, 2], data[:, 3], seed, density, amp_mean, side)
