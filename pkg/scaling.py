"""State classes, scar scores against a clean baseline, and D_q scaling fits."""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import linregress

from errors import ParameterError
from grid import Wavefunction
from observables import StateDiagnostics, de_broglie, inertia_anisotropy
from settings import ClassThresholds

logger = logging.getLogger(__name__)

LABELS = ("anderson", "scarred", "delocalized", "ambiguous")
MIN_SIZES = 3


@dataclass(frozen=True, eq=False)
class BaselineCurve:
    """Percentile of ⟨T⟩/⟨V⟩ per normalized-energy bin of a disorder-free run."""

    edges: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)
    percentile: float = 90.0

    def value_at(self, e_norm: float) -> float:
        k = int(np.clip(np.searchsorted(self.edges, e_norm, side="right") - 1, 0, len(self.values) - 1))
        return float(self.values[k])


def build_clean_baseline(
    diags: list[StateDiagnostics], percentile: float = 90.0, n_bins: int = 20
) -> BaselineCurve:
    """Bins without clean states borrow the value interpolated between their neighbours."""
    pairs = [(d.e_norm, d.tv_ratio) for d in diags if d.tv_ratio is not None]
    if not pairs:
        raise ParameterError("clean run has no state with a defined T/V ratio")
    e_norm, tv = (np.array(v, dtype=np.float64) for v in zip(*pairs))
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    which = np.clip(np.searchsorted(edges, e_norm, side="right") - 1, 0, n_bins - 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    filled, known = [], []
    for k in range(n_bins):
        members = tv[which == k]
        if members.size:
            filled.append(float(np.percentile(members, percentile)))
            known.append(k)
    values = np.interp(centers, centers[known], filled)
    return BaselineCurve(edges, values, float(percentile))


def scar_score(
    psi: Wavefunction,
    diag: StateDiagnostics,
    baseline: BaselineCurve | None,
    w_kinetic: float = 0.5,
    w_anisotropy: float = 0.5,
) -> float:
    """w₁·relative T/V excess over the clean percentile (≥ 0) + w₂·inertia anisotropy."""
    if baseline is None:
        raise ParameterError("scar score needs a clean baseline")
    reference = baseline.value_at(diag.e_norm)
    excess = 0.0
    if diag.tv_ratio is not None and reference > 0:
        excess = max((diag.tv_ratio - reference) / reference, 0.0)
    return float(w_kinetic * excess + w_anisotropy * inertia_anisotropy(psi))


@dataclass(frozen=True)
class StateClass:
    label: str
    tail_ok: bool
    ipr_band: float
    scar_score: float


def classify_state(
    diag: StateDiagnostics,
    psi: Wavefunction | None,
    thresholds: ClassThresholds,
    side_length: float,
) -> StateClass:
    """Rules apply in order: anderson, scarred, delocalized, otherwise ambiguous."""
    if side_length <= 0:
        raise ParameterError("side_length must be positive")
    score = diag.scar_score
    if score is None:
        score = thresholds.w_anisotropy * inertia_anisotropy(psi) if psi is not None else 0.0
    tail_ok = diag.xi_tail is not None and diag.consistency is not None
    band = diag.ipr2 * side_length * side_length

    if (
        tail_ok
        and thresholds.consistency_lo <= diag.consistency <= thresholds.consistency_hi
        and diag.xi_tail < thresholds.xi_fraction * side_length
    ):
        label = "anderson"
    elif score > thresholds.scar_threshold:
        label = "scarred"
    elif band < thresholds.delocalized_factor:
        label = "delocalized"
    else:
        label = "ambiguous"
    return StateClass(label, bool(tail_ok), float(band), float(score))


def wavelength_gate(e: float, v_mean: float, a: float) -> bool:
    """λ(E) < a, strictly; the forbidden regime is never scar-eligible."""
    wavelength = de_broglie(e, v_mean)
    return wavelength is not None and wavelength < a


def label_states(
    diags: list[StateDiagnostics],
    states: dict[int, Wavefunction],
    baseline: BaselineCurve,
    thresholds: ClassThresholds,
    side_length: float,
) -> list[StateDiagnostics]:
    """Fill scar_score and label in place; states missing from ``states`` keep score None."""
    for diag in diags:
        psi = states.get(diag.index)
        if psi is not None:
            diag.scar_score = scar_score(
                psi, diag, baseline, thresholds.w_kinetic, thresholds.w_anisotropy
            )
        diag.label = classify_state(diag, psi, thresholds, side_length).label
    return diags


# --- scaling exponents -------------------------------------------------------------

@dataclass(frozen=True)
class ScalingFit:
    q: float
    slope: float
    dim_est: float
    stderr: float
    class_filter: str = "all"
    n_sizes: int = 0


def fit_fractal_dimension(points, q: float, class_filter: str = "all") -> ScalingFit:
    """Least squares of log IPR_q on log L; D_q = -slope/(q-1). ``stderr`` is the slope's."""
    if q <= 1:
        raise ParameterError(f"moment order must exceed 1, got {q}")
    pts = sorted((float(size), float(value)) for size, value in points)
    sizes = np.array([p[0] for p in pts])
    values = np.array([p[1] for p in pts])
    if len(np.unique(sizes)) < MIN_SIZES:
        raise ParameterError(f"scaling fit needs >= {MIN_SIZES} distinct sizes, got {len(np.unique(sizes))}")
    if np.any(sizes <= 0) or np.any(values <= 0):
        raise ParameterError("sizes and IPR values must be positive")
    result = linregress(np.log(sizes), np.log(values))
    slope = float(result.slope)
    return ScalingFit(
        q=float(q),
        slope=slope,
        dim_est=-slope / (q - 1.0),
        stderr=float(abs(result.stderr)),
        class_filter=class_filter,
        n_sizes=int(len(np.unique(sizes))),
    )
