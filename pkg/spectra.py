"""Unfolding-free level statistics: spacing ratios and Poisson/GOE references."""

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np
from scipy.integrate import quad

from errors import ParameterError

logger = logging.getLogger(__name__)

KINDS = ("poisson", "goe")
DEGENERACY_EPS = 1e-12


class SpacingRatios(NamedTuple):
    ratios: np.ndarray
    n_dropped: int


def spacing_ratios(energies, eps: float = DEGENERACY_EPS) -> SpacingRatios:
    """s_n = δ_n/δ_{n-1} over spacings that survive the degeneracy cut.

    Spacings ≤ eps × spectral span are removed (and counted) before ratios of
    consecutive spacings are formed.
    """
    e = np.asarray(energies, dtype=np.float64)
    if e.size < 3:
        raise ParameterError(f"need at least 3 levels, got {e.size}")
    if np.any(np.diff(e) < 0):
        raise ParameterError("energies must be sorted ascending")
    delta = np.diff(e)
    span = e[-1] - e[0]
    keep = delta > eps * span
    kept = delta[keep]
    ratios = kept[1:] / kept[:-1] if kept.size >= 2 else np.empty(0)
    return SpacingRatios(ratios, int(np.count_nonzero(~keep)))


def symmetrize(ratios) -> np.ndarray:
    s = np.asarray(ratios, dtype=np.float64)
    return np.minimum(s, 1.0 / s)


def symmetrized_mean(ratios) -> float:
    s = np.asarray(ratios, dtype=np.float64)
    if s.size == 0:
        raise ParameterError("no ratios to average")
    return float(np.mean(symmetrize(s)))


def reference_pdf(kind: str, s):
    """Exact ratio densities: 1/(1+s)² and (27/8)(s+s²)/(1+s+s²)^{5/2}."""
    s = np.asarray(s, dtype=np.float64)
    if kind == "poisson":
        value = 1.0 / (1.0 + s) ** 2
    elif kind == "goe":
        value = (27.0 / 8.0) * (s + s * s) / (1.0 + s + s * s) ** 2.5
    else:
        raise ParameterError(f"unknown reference kind {kind!r}")
    return float(value) if value.ndim == 0 else value


def reference_cdf(kind: str, s: float) -> float:
    if s == np.inf:
        return 1.0
    if kind == "poisson":
        return float(s / (1.0 + s))
    value, _ = quad(lambda x: reference_pdf(kind, x), 0.0, s, limit=200)
    return float(value)


@lru_cache(maxsize=None)
def reference_mean(kind: str) -> float:
    """⟨min(s, 1/s)⟩ under the reference density (2 ln2 - 1, 4 - 2√3)."""
    # s and 1/s are equally distributed, so ⟨s̃⟩ = 2∫₀¹ s P(s) ds
    value, _ = quad(lambda x: x * reference_pdf(kind, x), 0.0, 1.0)
    return 2.0 * value


@dataclass(frozen=True, eq=False)
class Histogram:
    edges: np.ndarray = field(repr=False)
    density: np.ndarray = field(repr=False)
    n_samples: int = 0
    overflow: float = 0.0

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)

    @property
    def retained(self) -> float:
        return float(np.sum(self.density * self.widths))


def empirical_pdf(values, n_bins: int = 40, s_max: float = 5.0) -> Histogram:
    """Histogram normalized by the total sample count; mass above s_max is overflow."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ParameterError("empty sample")
    if s_max <= 0:
        raise ParameterError("s_max must be positive")
    edges = np.linspace(0.0, s_max, n_bins + 1)
    counts, _ = np.histogram(v, bins=edges)
    density = counts / (v.size * np.diff(edges))
    overflow = float(np.count_nonzero(v > s_max)) / v.size
    return Histogram(edges, density, int(v.size), overflow)


def reference_histogram(kind: str, edges) -> Histogram:
    """The reference density integrated into ``edges`` (exact bin masses)."""
    edges = np.asarray(edges, dtype=np.float64)
    cdf = np.array([reference_cdf(kind, e) for e in edges])
    mass = np.diff(cdf)
    return Histogram(edges, mass / np.diff(edges), 0, float(1.0 - cdf[-1]))


def distribution_distance(hist: Histogram, kind: str) -> float:
    """Total-variation distance to the bin-integrated reference, overflow included."""
    ref = reference_histogram(kind, hist.edges)
    emp_mass = hist.density * hist.widths
    ref_mass = ref.density * ref.widths
    return float(0.5 * (np.sum(np.abs(emp_mass - ref_mass)) + abs(hist.overflow - ref.overflow)))


# --- assembled statistics ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SpectrumStats:
    ratios: np.ndarray = field(repr=False)
    sym_ratios: np.ndarray = field(repr=False)
    mean_sym: float
    histogram: Histogram = field(repr=False)
    window: tuple[int, int]
    n_dropped: int
    n_levels: int
    tv_poisson: float
    tv_goe: float

    def summary(self) -> dict:
        return {
            "mean_sym": self.mean_sym,
            "n_levels": self.n_levels,
            "n_ratios": int(self.ratios.size),
            "window": list(self.window),
            "n_dropped": self.n_dropped,
            "tv_poisson": self.tv_poisson,
            "tv_goe": self.tv_goe,
            "reference_poisson": reference_mean("poisson"),
            "reference_goe": reference_mean("goe"),
        }


def select_window(
    energies,
    index_window: tuple[int, int] | None = None,
    energy_window: tuple[float, float] | None = None,
) -> tuple[np.ndarray, tuple[int, int]]:
    """Levels inside a half-open index range or a closed energy range."""
    e = np.sort(np.asarray(energies, dtype=np.float64))
    lo, hi = 0, e.size
    if index_window is not None:
        lo, hi = max(index_window[0], 0), min(index_window[1], e.size)
    if energy_window is not None:
        inside = np.nonzero((e >= energy_window[0]) & (e <= energy_window[1]))[0]
        inside = inside[(inside >= lo) & (inside < hi)]
        lo, hi = (int(inside[0]), int(inside[-1]) + 1) if inside.size else (lo, lo)
    return e[lo:hi], (int(lo), int(hi))


def spectrum_stats(
    energies,
    index_window: tuple[int, int] | None = None,
    energy_window: tuple[float, float] | None = None,
    n_bins: int = 40,
    s_max: float = 5.0,
) -> SpectrumStats:
    levels, window = select_window(energies, index_window, energy_window)
    if levels.size < 3:
        raise ParameterError(f"window {window} holds {levels.size} levels; need >= 3")
    result = spacing_ratios(levels)
    return stats_from_ratios(result.ratios, window, result.n_dropped, levels.size, n_bins, s_max)


def stats_from_ratios(ratios, window, n_dropped, n_levels, n_bins=40, s_max=5.0) -> SpectrumStats:
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.size == 0:
        raise ParameterError("window produced no spacing ratios")
    hist = empirical_pdf(ratios, n_bins, s_max)
    return SpectrumStats(
        ratios=ratios,
        sym_ratios=symmetrize(ratios),
        mean_sym=symmetrized_mean(ratios),
        histogram=hist,
        window=tuple(window),
        n_dropped=int(n_dropped),
        n_levels=int(n_levels),
        tv_poisson=distribution_distance(hist, "poisson"),
        tv_goe=distribution_distance(hist, "goe"),
    )


def pool_stats(parts: list[SpectrumStats], n_bins: int = 40, s_max: float = 5.0) -> SpectrumStats:
    """Ensemble aggregate: ratios are pooled, so the result ignores ordering."""
    if not parts:
        raise ParameterError("nothing to pool")
    ratios = np.sort(np.concatenate([p.ratios for p in parts]))
    return stats_from_ratios(
        ratios,
        (min(p.window[0] for p in parts), max(p.window[1] for p in parts)),
        sum(p.n_dropped for p in parts),
        sum(p.n_levels for p in parts),
        n_bins,
        s_max,
    )
