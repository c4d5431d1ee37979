"""Deep-well reduction of the continuum model to the 2D Anderson lattice.

Each well hosts one orbital with energy E₀ shifted by the amplitudes of the
bumps sitting inside it; neighbouring wells couple through a uniform hopping t.
Open boundaries match the continuum's hard walls.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigh
from scipy.optimize import linear_sum_assignment
from scipy.stats import spearmanr

from errors import ParameterError, SizeCapError
from grid import Wavefunction, make_grid
from potential import DisorderRealization, FermiParams, build_lattice_potential
from solver import build_hamiltonian, solve_lowest

logger = logging.getLogger(__name__)

MAX_SITES = 10_000


@dataclass(frozen=True, eq=False)
class TBModel:
    size: int
    onsite: np.ndarray = field(repr=False)
    hopping: float
    e0: float
    crowded_wells: tuple[tuple[int, int], ...] = ()

    def __post_init__(self) -> None:
        onsite = np.asarray(self.onsite, dtype=np.float64).reshape(self.size, self.size)
        onsite.flags.writeable = False
        object.__setattr__(self, "onsite", onsite)

    @property
    def n_sites(self) -> int:
        return self.size * self.size

    def matrix(self) -> np.ndarray:
        n = self.size
        chain = sp.diags([1.0, 1.0], [-1, 1], shape=(n, n))
        eye = sp.identity(n)
        hop = self.hopping * (sp.kron(chain, eye) + sp.kron(eye, chain))
        return (hop + sp.diags(self.onsite.ravel())).toarray()


def reduce_to_tb(
    fermi: FermiParams, realization: DisorderRealization | None, e0: float, t: float
) -> TBModel:
    """ε_i = e0 + Σ amplitudes of bumps within r0 of well i's centre."""
    n = fermi.wells
    onsite = np.full((n, n), float(e0))
    hits = np.zeros((n, n), dtype=int)
    if realization is not None and len(realization):
        a, r0 = fermi.a, fermi.r0
        for (x, y), amp in zip(realization.positions, realization.amplitudes):
            # r0 may exceed a/2, so one bump can sit inside several wells
            i_lo, j_lo = (max(int(np.floor((c - r0) / a)), 0) for c in (x, y))
            i_hi, j_hi = (min(int(np.floor((c + r0) / a)), n - 1) for c in (x, y))
            for i in range(i_lo, i_hi + 1):
                for j in range(j_lo, j_hi + 1):
                    if np.hypot(x - (i + 0.5) * a, y - (j + 0.5) * a) < r0:
                        onsite[i, j] += amp
                        hits[i, j] += 1
    crowded = tuple((int(i), int(j)) for i, j in zip(*np.nonzero(hits > 1)))
    if crowded:
        logger.warning(
            "Deep-well assumption stretched: %d wells hold more than one bump", len(crowded)
        )
    return TBModel(n, onsite, float(t), float(e0), crowded)


def box_disorder_model(size: int, width: float, t: float, seed: int, e0: float = 0.0) -> TBModel:
    """Uniform onsite disorder on [-W/2, W/2] (classic Anderson box)."""
    rng = np.random.default_rng(seed)
    onsite = e0 + rng.uniform(-0.5 * width, 0.5 * width, size=(size, size))
    return TBModel(size, onsite, float(t), float(e0))


def tb_spectrum(model: TBModel) -> tuple[np.ndarray, np.ndarray]:
    """Full ordered spectrum and site-basis eigenvectors (columns)."""
    if model.n_sites > MAX_SITES:
        raise SizeCapError(f"{model.n_sites} sites exceed dense cap {MAX_SITES}")
    return eigh(model.matrix())


def clean_dispersion(size: int, e0: float, t: float) -> np.ndarray:
    k = np.arange(1, size + 1)
    band = 2.0 * t * np.cos(np.pi * k / (size + 1))
    return np.sort((e0 + band[:, None] + band[None, :]).ravel())


def tb_ipr(state) -> float:
    c = np.asarray(state, dtype=np.float64)
    return float(np.sum(c ** 4))


# --- parameters from continuum solves --------------------------------------------

def estimate_tb_parameters(fermi: FermiParams, points_per_well: int = 96, tol: float = 1e-8,
                           method: str = "arpack") -> tuple[float, float]:
    """E₀ from one clean well; t from the lowest four levels of a clean 2×2 array.

    The 2×2 open lattice has levels E₀ + t·{-2, 0, 0, 2}, so the spread of
    the lowest band is 4|t|; bonding lies lowest, hence t < 0.
    """
    single = FermiParams(fermi.r0, fermi.d, fermi.v0, fermi.a, 1)
    grid1 = make_grid(single.side_length, points_per_well)
    ground = solve_lowest(build_hamiltonian(build_lattice_potential(single, grid1)), 1, tol, method=method)
    e0 = float(ground.energies[0])

    pair = FermiParams(fermi.r0, fermi.d, fermi.v0, fermi.a, 2)
    grid2 = make_grid(pair.side_length, 2 * points_per_well + 1)
    band = solve_lowest(build_hamiltonian(build_lattice_potential(pair, grid2)), 4, tol, method=method)
    t = -float(band.energies[3] - band.energies[0]) / 4.0
    logger.info("Estimated tight-binding parameters e0=%.6f t=%.6e", e0, t)
    return e0, t


# --- continuum comparison ---------------------------------------------------------

def well_occupations(psi: Wavefunction, fermi: FermiParams) -> np.ndarray:
    """Probability in each lattice cell, flattened like the TB site index."""
    grid = psi.grid
    x, y = grid.mesh()
    n = fermi.wells
    ci = np.clip(np.floor((x - grid.origin[0]) / fermi.a).astype(int), 0, n - 1)
    cj = np.clip(np.floor((y - grid.origin[1]) / fermi.a).astype(int), 0, n - 1)
    weights = np.bincount((ci * n + cj).ravel(), weights=psi.density.ravel(), minlength=n * n)
    return weights * grid.cell_area


def compare_with_continuum(
    model: TBModel,
    tb_energies: np.ndarray,
    tb_vectors: np.ndarray,
    continuum_energies,
    continuum_states: list[Wavefunction],
    fermi: FermiParams,
) -> dict:
    """Match low-band continuum states to TB states by well occupation.

    Overlap is 1 - total-variation distance between occupation vectors; the
    assignment maximizing total overlap pairs the states, and Spearman's rank
    correlation of the paired energies summarizes the agreement.
    """
    n = min(model.n_sites, len(continuum_states))
    if n < 3:
        raise ParameterError("need at least 3 continuum states to compare")
    occ_c = np.array([well_occupations(psi, fermi) for psi in continuum_states[:n]])
    occ_c /= occ_c.sum(axis=1, keepdims=True)
    occ_t = (tb_vectors ** 2).T
    overlap = 1.0 - 0.5 * np.abs(occ_c[:, None, :] - occ_t[None, :, :]).sum(axis=2)
    rows, cols = linear_sum_assignment(-overlap)
    rho, pvalue = spearmanr(np.asarray(continuum_energies)[:n][rows], tb_energies[cols])
    return {
        "n_matched": int(n),
        "spearman_rho": float(rho),
        "spearman_p": float(pvalue),
        "mean_overlap": float(overlap[rows, cols].mean()),
    }
