"""Per-state localization diagnostics: IPR, energy partition, radial tails."""

import logging
from dataclasses import dataclass, field

import numpy as np

from errors import ParameterError
from grid import ScalarField, Wavefunction, require_same_grid

logger = logging.getLogger(__name__)

DENSITY_FLOOR = 1e-30
DEFAULT_Q = (2, 3, 4)


@dataclass
class StateDiagnostics:
    index: int
    energy: float
    e_norm: float
    ipr2: float
    ipr_q: dict[float, float]
    t_exp: float
    v_exp: float
    tv_ratio: float | None
    lambda_db: float | None
    xi_tail: float | None = None
    xi_envelope: float | None = None
    tail_fit_quality: float | None = None
    tail_reason: str = ""
    consistency: float | None = None
    anisotropy: float = 0.0
    centroid: tuple[float, float] = (0.0, 0.0)
    residual: float = 0.0
    scar_score: float | None = None
    label: str | None = None


def ipr(psi: Wavefunction, q: float = 2) -> float:
    """Quadrature of |ψ|^{2q}; q ≥ 2."""
    if q < 2:
        raise ParameterError(f"IPR order must be >= 2, got {q}")
    return float(np.sum(np.abs(psi.values) ** (2 * q)) * psi.grid.cell_area)


def normalized_energy(e: float, e_min: float, e_max: float) -> float:
    if not e_max > e_min:
        raise ParameterError(f"degenerate energy range [{e_min}, {e_max}]")
    return (e - e_min) / (e_max - e_min)


def kinetic_expectation(psi: Wavefunction) -> float:
    """⟨ψ, -½∇²ψ⟩ with the 5-point stencil, written as ½Σ(edge differences)².

    Padding with zeros supplies the wall edges, so the sum equals the
    Hamiltonian's kinetic term exactly.
    """
    padded = np.pad(psi.values, 1)
    dx = np.diff(padded[:, 1:-1], axis=0)
    dy = np.diff(padded[1:-1, :], axis=1)
    return float(0.5 * (np.sum(dx * dx) + np.sum(dy * dy)))


def potential_expectation(psi: Wavefunction, v: ScalarField) -> float:
    grid = require_same_grid(psi, v)
    return float(np.sum(v.values * psi.density) * grid.cell_area)


def de_broglie(e: float, v_mean: float) -> float | None:
    """2π/√(2(E-⟨V⟩)); None in the classically forbidden regime."""
    if e <= v_mean:
        return None
    return float(2.0 * np.pi / np.sqrt(2.0 * (e - v_mean)))


def probability_centroid(psi: Wavefunction) -> tuple[float, float]:
    x, y = psi.grid.mesh()
    rho = psi.density
    total = rho.sum()
    if total == 0:
        raise ParameterError("centroid of a zero field")
    return float(np.sum(x * rho) / total), float(np.sum(y * rho) / total)


def inertia_anisotropy(psi: Wavefunction) -> float:
    """1 - λ_min/λ_max of the second-moment tensor of |ψ|² about its centroid."""
    x, y = psi.grid.mesh()
    rho = psi.density
    total = rho.sum()
    cx, cy = np.sum(x * rho) / total, np.sum(y * rho) / total
    dx, dy = x - cx, y - cy
    sxx = np.sum(rho * dx * dx) / total
    syy = np.sum(rho * dy * dy) / total
    sxy = np.sum(rho * dx * dy) / total
    low, high = np.linalg.eigvalsh(np.array([[sxx, sxy], [sxy, syy]]))
    if high <= 0:
        return 0.0
    return float(1.0 - max(low, 0.0) / high)


# --- radial profiles and tail fits ----------------------------------------------

@dataclass(frozen=True, eq=False)
class RadialProfile:
    edges: np.ndarray = field(repr=False)
    r: np.ndarray = field(repr=False)
    density: np.ndarray = field(repr=False)
    counts: np.ndarray = field(repr=False)
    center: tuple[float, float] = (0.0, 0.0)
    side_length: float = 0.0

    @property
    def empty_bins(self) -> np.ndarray:
        return self.counts == 0


def radial_profile(
    psi: Wavefunction,
    center: tuple[float, float] | None = None,
    n_bins: int = 48,
    r_max: float | None = None,
) -> RadialProfile:
    """Angular average of |ψ|² in equal-width annuli about ``center``.

    The centre defaults to the probability centroid. Each bin reports the mean
    radius of the grid points it holds (the geometric bin centre when empty).
    """
    if n_bins < 8:
        raise ParameterError(f"radial profile needs >= 8 bins, got {n_bins}")
    grid = psi.grid
    if center is None:
        center = probability_centroid(psi)
    if r_max is None:
        r_max = 0.5 * grid.side_length
    x, y = grid.mesh()
    dist = np.hypot(x - center[0], y - center[1]).ravel()
    rho = psi.density.ravel()
    edges = np.linspace(0.0, r_max, n_bins + 1)
    which = np.digitize(dist, edges) - 1
    inside = (which >= 0) & (which < n_bins)
    counts = np.bincount(which[inside], minlength=n_bins)
    sums = np.bincount(which[inside], weights=rho[inside], minlength=n_bins)
    rsums = np.bincount(which[inside], weights=dist[inside], minlength=n_bins)
    mids = 0.5 * (edges[:-1] + edges[1:])
    with np.errstate(invalid="ignore", divide="ignore"):
        density = np.where(counts > 0, sums / counts, np.nan)
        r = np.where(counts > 0, rsums / counts, mids)
    return RadialProfile(edges, r, density, counts, (float(center[0]), float(center[1])), grid.side_length)


@dataclass(frozen=True)
class TailWindowPolicy:
    max_slope_variation: float = 0.15
    min_r2: float = 0.98
    min_bins: int = 8
    density_floor: float = DENSITY_FLOOR
    max_xi: float | None = None


@dataclass(frozen=True)
class TailFit:
    xi_tail: float | None
    xi_envelope: float | None = None
    r_range: tuple[float, float] | None = None
    r2: float | None = None
    intercept: float | None = None
    reason: str = ""

    @property
    def ok(self) -> bool:
        return self.xi_tail is not None


def _line_fit(r: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    slope, intercept = np.polyfit(r, y, 1)
    resid = y - (slope * r + intercept)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid * resid) / ss_tot if ss_tot > 0 else 0.0
    return float(slope), float(intercept), float(r2)


def _valid_runs(valid: np.ndarray) -> list[np.ndarray]:
    runs, current = [], []
    for k, ok in enumerate(valid):
        if ok:
            current.append(k)
        elif current:
            runs.append(np.array(current))
            current = []
    if current:
        runs.append(np.array(current))
    return runs


def fit_tail(profile: RadialProfile, policy: TailWindowPolicy = TailWindowPolicy()) -> TailFit:
    """Fit ln|ψ|² = c + m r on the longest clean exponential window.

    A window qualifies when every local slope is negative, local slopes vary
    by less than ``max_slope_variation`` of their mean, R² ≥ ``min_r2`` and
    ξ_tail = -2/m stays below ``max_xi`` (the domain side by default).
    """
    max_xi = policy.max_xi if policy.max_xi is not None else profile.side_length
    with np.errstate(invalid="ignore"):
        valid = (profile.counts > 0) & (profile.density > policy.density_floor)
    if int(valid.sum()) < policy.min_bins:
        return TailFit(None, reason="too_few_bins")

    best = None
    rejected_xi = False
    for run in _valid_runs(valid):
        if len(run) < policy.min_bins:
            continue
        r_all = profile.r[run]
        y_all = np.log(profile.density[run])
        local = np.diff(y_all) / np.diff(r_all)
        for lo in range(len(run)):
            for hi in range(len(run) - 1, lo + policy.min_bins - 2, -1):
                size = hi - lo + 1
                if best is not None and size < best[0]:
                    break
                slopes = local[lo:hi]
                if np.any(slopes >= 0):
                    continue
                mean_slope = slopes.mean()
                if (slopes.max() - slopes.min()) / abs(mean_slope) >= policy.max_slope_variation:
                    continue
                m, c, r2 = _line_fit(r_all[lo:hi + 1], y_all[lo:hi + 1])
                if r2 < policy.min_r2 or m >= 0:
                    continue
                if -2.0 / m > max_xi:
                    rejected_xi = True
                    continue
                if best is None or size > best[0] or (size == best[0] and r2 > best[3]):
                    best = (size, m, c, r2, (float(r_all[lo]), float(r_all[hi])))
    if best is None:
        return TailFit(None, reason="xi_exceeds_guard" if rejected_xi else "no_window")
    _, m, c, r2, r_range = best
    return TailFit(-2.0 / m, -1.0 / m, r_range, r2, c)


def ipr_xi_consistency(ipr2: float, xi: float) -> float:
    """ipr2·8π·ξ²; equals 1 for |ψ|² = e^{-r/ξ}/(2πξ²)."""
    if ipr2 <= 0 or xi <= 0:
        raise ParameterError("ipr2 and xi must be positive")
    return float(ipr2 * 8.0 * np.pi * xi * xi)


def tail_consistency(ipr2: float, xi_tail: float) -> float:
    """Consistency ratio written through the fitted ξ_tail (envelope = ξ_tail/2)."""
    return ipr_xi_consistency(ipr2, 0.5 * xi_tail)


# --- full per-state record --------------------------------------------------------

def diagnose_state(
    index: int,
    psi: Wavefunction,
    energy: float,
    potential: ScalarField,
    e_min: float,
    e_max: float,
    *,
    q_list=DEFAULT_Q,
    n_bins: int = 48,
    policy: TailWindowPolicy = TailWindowPolicy(),
    residual: float = 0.0,
) -> StateDiagnostics:
    t_exp = kinetic_expectation(psi)
    v_exp = potential_expectation(psi, potential)
    e_norm = normalized_energy(energy, e_min, e_max) if e_max > e_min else 0.0
    iprs = {float(q): ipr(psi, q) for q in q_list}
    ipr2 = iprs.get(2.0, ipr(psi, 2))
    tail = fit_tail(radial_profile(psi, n_bins=n_bins), policy)
    return StateDiagnostics(
        index=index,
        energy=float(energy),
        e_norm=float(min(max(e_norm, 0.0), 1.0)),
        ipr2=ipr2,
        ipr_q=iprs,
        t_exp=t_exp,
        v_exp=v_exp,
        tv_ratio=t_exp / v_exp if v_exp > 0 else None,
        lambda_db=de_broglie(energy, v_exp),
        xi_tail=tail.xi_tail,
        xi_envelope=tail.xi_envelope,
        tail_fit_quality=tail.r2,
        tail_reason=tail.reason,
        consistency=tail_consistency(ipr2, tail.xi_tail) if tail.ok else None,
        anisotropy=inertia_anisotropy(psi),
        centroid=probability_centroid(psi),
        residual=float(residual),
    )
