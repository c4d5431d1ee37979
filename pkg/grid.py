"""Square computational domain with Dirichlet walls, fields and quadrature.

Only interior points are stored: the walls sit exactly on the domain edges and
every field is implicitly zero there, so a 5-point stencil that treats
out-of-domain neighbours as zero implements the hard walls directly.
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from errors import GridMismatchError, ParameterError

logger = logging.getLogger(__name__)

MIN_POINTS = 8

FIELD_MAGIC = b"LLF1"
# magic, u32 points_per_axis, f64 side_length (little-endian, no padding)
_HEADER = struct.Struct("<4sId")


@dataclass(frozen=True)
class Grid2D:
    side_length: float
    points_per_axis: int
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self) -> None:
        if not np.isfinite(self.side_length) or self.side_length <= 0:
            raise ParameterError(f"non-positive extent: side_length={self.side_length}")
        if int(self.points_per_axis) != self.points_per_axis or self.points_per_axis < MIN_POINTS:
            raise ParameterError(
                f"points_per_axis must be an integer >= {MIN_POINTS}, got {self.points_per_axis}"
            )

    @property
    def spacing(self) -> float:
        return self.side_length / (self.points_per_axis + 1)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.points_per_axis, self.points_per_axis)

    @property
    def size(self) -> int:
        return self.points_per_axis * self.points_per_axis

    @property
    def cell_area(self) -> float:
        return self.spacing * self.spacing

    def axis(self, dim: int = 0) -> np.ndarray:
        h = self.spacing
        return self.origin[dim] + h * np.arange(1, self.points_per_axis + 1)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Coordinate arrays X, Y of shape (N, N), indexed [i_x, i_y]."""
        return np.meshgrid(self.axis(0), self.axis(1), indexing="ij")

    def index_of(self, x: float, y: float) -> tuple[int, int]:
        """Nearest interior grid index to a coordinate (clipped to the domain)."""
        h = self.spacing
        i = int(round((x - self.origin[0]) / h)) - 1
        j = int(round((y - self.origin[1]) / h)) - 1
        last = self.points_per_axis - 1
        return min(max(i, 0), last), min(max(j, 0), last)

    def contains(self, x: float, y: float) -> bool:
        ox, oy = self.origin
        return ox < x < ox + self.side_length and oy < y < oy + self.side_length


def make_grid(side_length: float, points_per_axis: int) -> Grid2D:
    return Grid2D(float(side_length), int(points_per_axis))


def _frozen(values, grid: Grid2D) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.size != grid.size:
        raise GridMismatchError(
            f"field has {arr.size} values, grid expects {grid.size}"
        )
    arr = arr.reshape(grid.shape)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: Grid2D
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        arr = _frozen(self.values, self.grid)
        if not np.all(np.isfinite(arr)):
            raise ParameterError("scalar field contains NaN or Inf")
        object.__setattr__(self, "values", arr)

    @classmethod
    def zeros(cls, grid: Grid2D) -> "ScalarField":
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def constant(cls, grid: Grid2D, value: float) -> "ScalarField":
        return cls(grid, np.full(grid.shape, float(value)))


@dataclass(frozen=True, eq=False)
class Wavefunction:
    grid: Grid2D
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", _frozen(self.values, self.grid))

    @property
    def density(self) -> np.ndarray:
        return self.values * self.values

    def flipped(self) -> "Wavefunction":
        return Wavefunction(self.grid, -self.values)


def require_same_grid(*items) -> Grid2D:
    grid = items[0].grid
    for item in items[1:]:
        if item.grid != grid:
            raise GridMismatchError(f"grid mismatch: {grid} vs {item.grid}")
    return grid


def inner_product(f: Wavefunction, g: Wavefunction) -> float:
    """Midpoint quadrature of f·g over the domain."""
    grid = require_same_grid(f, g)
    return float(np.sum(f.values * g.values) * grid.cell_area)


def norm(psi: Wavefunction) -> float:
    return float(np.sqrt(inner_product(psi, psi)))


def normalize(psi: Wavefunction) -> Wavefunction:
    n = norm(psi)
    if n == 0.0 or not np.isfinite(n):
        raise ParameterError("cannot normalize a zero field")
    return Wavefunction(psi.grid, psi.values / n)


# --- binary field files -------------------------------------------------------

def write_field(path: str | Path, item: ScalarField | Wavefunction) -> Path:
    """Write ``LLF1`` header followed by N² little-endian f64 values, row-major."""
    path = Path(path)
    grid = item.grid
    header = _HEADER.pack(FIELD_MAGIC, grid.points_per_axis, grid.side_length)
    with open(path, "wb") as handle:
        handle.write(header)
        handle.write(np.ascontiguousarray(item.values, dtype="<f8").tobytes(order="C"))
    return path


def read_field(path: str | Path, kind: type = Wavefunction) -> ScalarField | Wavefunction:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ParameterError(f"{path}: truncated field header")
    magic, n, side = _HEADER.unpack_from(raw)
    if magic != FIELD_MAGIC:
        raise ParameterError(f"{path}: bad magic {magic!r}, expected {FIELD_MAGIC!r}")
    grid = make_grid(side, n)
    expected = _HEADER.size + 8 * grid.size
    if len(raw) != expected:
        raise ParameterError(f"{path}: expected {expected} bytes, found {len(raw)}")
    values = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(grid.shape)
    return kind(grid, values.astype(np.float64))
