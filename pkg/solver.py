"""Finite-difference Hamiltonian H = -½∇² + V and lowest-eigenpair solvers."""

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigh, qr
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh, lobpcg, splu
from tenacity import Retrying, before_sleep_log, retry_if_exception_type, stop_after_attempt

from errors import ConvergenceError, ParameterError, SizeCapError
from grid import Grid2D, ScalarField, Wavefunction, require_same_grid

logger = logging.getLogger(__name__)

METHODS = ("arpack", "lobpcg", "itp")
MAX_STATES = 1200
MAX_POINTS = 768
# n_states may not exceed this fraction of the operator dimension
STATE_FRACTION = 0.2
DEFAULT_MAX_ITER = 1000


@dataclass(frozen=True, eq=False)
class HamiltonianOperator:
    potential: ScalarField
    grid: Grid2D
    matrix: sp.csr_matrix = field(repr=False)

    @property
    def dimension(self) -> int:
        return self.grid.size


def laplacian_1d(n: int, h: float) -> sp.csr_matrix:
    """-d²/dx² on n interior points; neighbours outside the wall are zero."""
    return sp.diags([-1.0, 2.0, -1.0], [-1, 0, 1], shape=(n, n), format="csr") / (h * h)


def kinetic_matrix(grid: Grid2D) -> sp.csr_matrix:
    n = grid.points_per_axis
    d1 = laplacian_1d(n, grid.spacing)
    eye = sp.identity(n, format="csr")
    return (0.5 * (sp.kron(d1, eye) + sp.kron(eye, d1))).tocsr()


def build_hamiltonian(potential: ScalarField) -> HamiltonianOperator:
    grid = potential.grid
    matrix = kinetic_matrix(grid) + sp.diags(potential.values.ravel(), 0, format="csr")
    return HamiltonianOperator(potential, grid, matrix.tocsr())


def apply_hamiltonian(op: HamiltonianOperator, psi: Wavefunction) -> Wavefunction:
    require_same_grid(op, psi)
    return Wavefunction(op.grid, (op.matrix @ psi.values.ravel()).reshape(op.grid.shape))


def residual_norm(op: HamiltonianOperator, psi: Wavefunction, e: float) -> float:
    """L² norm of Hψ - eψ under the grid quadrature."""
    require_same_grid(op, psi)
    vec = psi.values.ravel()
    r = op.matrix @ vec - e * vec
    return float(np.sqrt(np.dot(r, r) * op.grid.cell_area))


def box_dispersion(grid: Grid2D, k: int, m: int) -> float:
    """Exact 5-point eigenvalue of mode (k, m) in an empty Dirichlet box."""
    h = grid.spacing
    w = grid.side_length
    return (2.0 - np.cos(np.pi * k * h / w) - np.cos(np.pi * m * h / w)) / (h * h)


def box_mode(grid: Grid2D, k: int, m: int) -> Wavefunction:
    x, y = grid.mesh()
    w = grid.side_length
    values = np.sin(np.pi * k * (x - grid.origin[0]) / w) * np.sin(np.pi * m * (y - grid.origin[1]) / w)
    return Wavefunction(grid, values * (2.0 / w))


def points_for_spacing(side_length: float, max_spacing: float) -> int:
    return max(int(np.ceil(side_length / max_spacing)) - 1, 8)


def grid_rule_spacing(d: float, sigma: float, e_target: float, v_mean: float) -> float:
    """Largest spacing allowed: min(1.5 d, σ/4, λ(E_target)/8)."""
    limits = [1.5 * d, sigma / 4.0]
    if e_target > v_mean:
        limits.append(2.0 * np.pi / np.sqrt(2.0 * (e_target - v_mean)) / 8.0)
    return min(limits)


@dataclass(frozen=True, eq=False)
class EigenpairSet:
    energies: np.ndarray
    states: list[Wavefunction] = field(repr=False)
    residuals: np.ndarray
    solver_meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.energies) != len(self.states) or len(self.states) != len(self.residuals):
            raise ParameterError("energies, states and residuals differ in length")
        if np.any(np.diff(self.energies) < 0):
            raise ParameterError("energies must be non-decreasing")

    def __len__(self) -> int:
        return len(self.energies)

    @property
    def grid(self) -> Grid2D:
        return self.states[0].grid


def _check_request(op: HamiltonianOperator, n_states: int, tol: float) -> None:
    if tol <= 0:
        raise ParameterError(f"tolerance must be positive, got {tol}")
    if n_states < 1:
        raise ParameterError(f"n_states must be >= 1, got {n_states}")
    if op.grid.points_per_axis > MAX_POINTS:
        raise SizeCapError(f"grid {op.grid.points_per_axis}² exceeds cap {MAX_POINTS}²")
    if n_states > MAX_STATES:
        raise SizeCapError(f"n_states={n_states} exceeds cap {MAX_STATES}")
    if n_states > STATE_FRACTION * op.dimension:
        raise ParameterError(
            f"n_states={n_states} exceeds {STATE_FRACTION:.0%} of grid dimension {op.dimension}"
        )


def _shift(op: HamiltonianOperator) -> float:
    # below min(V), hence below the whole spectrum
    return float(op.potential.values.min()) - 1.0


def _shifted_factor(op: HamiltonianOperator, sigma: float, time_step: float | None = None):
    """LU of H - σ, or of 1 + τ(H - σ) when a time step is given."""
    eye = sp.identity(op.dimension, format="csr")
    mat = op.matrix - sigma * eye
    if time_step is not None:
        mat = eye + time_step * mat
    return splu(mat.tocsc())


def _ritz_residuals(matrix, vectors: np.ndarray, values: np.ndarray) -> np.ndarray:
    r = matrix @ vectors - vectors * values[None, :]
    return np.linalg.norm(r, axis=0)


def _solve_arpack(op, n_states, tol, rng, max_iter):
    sigma = _shift(op)
    v0 = rng.standard_normal(op.dimension)
    try:
        values, vectors = eigsh(
            op.matrix, k=n_states, sigma=sigma, which="LM", v0=v0, tol=0.0, maxiter=max_iter
        )
    except ArpackNoConvergence as exc:
        res = _ritz_residuals(op.matrix, exc.eigenvectors, exc.eigenvalues) if len(exc.eigenvalues) else []
        raise ConvergenceError(
            f"ARPACK converged {len(exc.eigenvalues)}/{n_states} pairs", res, max_iter
        ) from exc
    return values, vectors, max_iter


def _solve_lobpcg(op, n_states, tol, rng, max_iter):
    sigma = _shift(op)
    lu = _shifted_factor(op, sigma)
    precond = LinearOperator(op.matrix.shape, matvec=lu.solve, matmat=lu.solve, dtype=np.float64)
    x0 = rng.standard_normal((op.dimension, n_states))
    values, vectors, history = lobpcg(
        op.matrix,
        x0,
        M=precond,
        tol=0.1 * tol,
        maxiter=max_iter,
        largest=False,
        retResidualNormsHistory=True,
    )
    return values, vectors, len(history)


def _solve_itp(op, n_states, tol, rng, max_iter, time_step: float = 1.0):
    """Block imaginary-time propagation with implicit Euler steps.

    Each step applies (1 + τ(H - σ))⁻¹ to the block, then Rayleigh–Ritz
    re-orthonormalizes it; guard vectors beyond n_states speed up the tail.
    """
    sigma = _shift(op)
    lu = _shifted_factor(op, sigma, time_step=time_step)
    block = min(n_states + max(n_states // 5, 4), op.dimension)
    x = rng.standard_normal((op.dimension, block))
    x, _ = qr(x, mode="economic")
    res = np.full(n_states, np.inf)
    values = np.zeros(block)
    for iteration in range(1, max_iter + 1):
        x = lu.solve(x)
        q, _ = qr(x, mode="economic")
        projected = q.T @ (op.matrix @ q)
        values, rot = eigh(0.5 * (projected + projected.T))
        x = q @ rot
        res = _ritz_residuals(op.matrix, x[:, :n_states], values[:n_states])
        if np.all(res < tol):
            return values[:n_states], x[:, :n_states], iteration
    raise ConvergenceError(
        f"imaginary-time propagation stalled after {max_iter} steps", res, max_iter
    )


_SOLVERS = {"arpack": _solve_arpack, "lobpcg": _solve_lobpcg, "itp": _solve_itp}


def fix_sign(vector: np.ndarray) -> np.ndarray:
    """Flip so the largest-magnitude component is positive."""
    return vector if vector[np.argmax(np.abs(vector))] >= 0 else -vector


def solve_lowest(
    op: HamiltonianOperator,
    n_states: int,
    tol: float = 1e-6,
    *,
    method: str = "arpack",
    seed: int = 0,
    max_iter: int = DEFAULT_MAX_ITER,
    attempts: int = 3,
    itp_time_step: float = 1.0,
) -> EigenpairSet:
    """Lowest ``n_states`` eigenpairs of ``op`` with every residual below ``tol``.

    Failed attempts are retried with a doubled iteration budget; the seed of
    the initial subspace is reused so retries stay reproducible.
    """
    if method not in METHODS:
        raise ParameterError(f"unknown solver method {method!r}")
    _check_request(op, n_states, tol)
    h = op.grid.spacing

    start = time.perf_counter()
    for attempt in Retrying(
        stop=stop_after_attempt(attempts),
        retry=retry_if_exception_type(ConvergenceError),
        before_sleep=before_sleep_log(logger, logging.WARNING),
        reraise=True,
    ):
        with attempt:
            budget = max_iter * 2 ** (attempt.retry_state.attempt_number - 1)
            rng = np.random.default_rng(seed)
            if method == "itp":
                values, vectors, iterations = _solve_itp(
                    op, n_states, tol, rng, budget, time_step=itp_time_step
                )
            else:
                values, vectors, iterations = _SOLVERS[method](op, n_states, tol, rng, budget)

            order = np.argsort(values, kind="stable")
            values = np.asarray(values)[order]
            vectors = np.asarray(vectors)[:, order]
            states = []
            for col in range(vectors.shape[1]):
                v = fix_sign(vectors[:, col] / np.linalg.norm(vectors[:, col]))
                states.append(Wavefunction(op.grid, (v / h).reshape(op.grid.shape)))
            residuals = np.array(
                [residual_norm(op, psi, e) for psi, e in zip(states, values)]
            )
            if np.any(residuals >= tol):
                raise ConvergenceError(
                    f"{int(np.sum(residuals >= tol))} residuals above tol={tol:g} "
                    f"(worst {residuals.max():.3e})",
                    residuals,
                    iterations,
                )
    elapsed = time.perf_counter() - start
    logger.info(
        "Solved %d states on %d² grid with %s in %.2fs (max residual %.2e)",
        n_states, op.grid.points_per_axis, method, elapsed, residuals.max(),
    )
    meta = {
        "method": method,
        "tolerance": float(tol),
        "iterations": int(iterations),
        "attempts": int(attempt.retry_state.attempt_number),
        "seed": int(seed),
        "points_per_axis": int(op.grid.points_per_axis),
    }
    return EigenpairSet(values, states, residuals, meta)


def orthonormality_error(eps: EigenpairSet) -> float:
    """Largest |⟨ψ_i, ψ_j⟩ - δ_ij| over the set."""
    mat = np.stack([psi.values.ravel() for psi in eps.states], axis=1)
    gram = (mat.T @ mat) * eps.grid.cell_area
    return float(np.max(np.abs(gram - np.eye(len(eps)))))
