import numpy as np
import pytest
from numpy.testing import assert_allclose

from errors import GridMismatchError, ParameterError
from grid import (
    Grid2D,
    ScalarField,
    Wavefunction,
    inner_product,
    make_grid,
    norm,
    normalize,
    read_field,
    write_field,
)


@pytest.mark.parametrize(
    "side, points, spacing",
    [(10.0, 255, 0.0390625), (2.0, 8, 2.0 / 9.0)],
)
def test_spacing_uses_interior_points(side, points, spacing):
    assert make_grid(side, points).spacing == pytest.approx(spacing, rel=1e-15)


@pytest.mark.parametrize("side, points", [(0.0, 64), (-1.0, 64), (1.0, 7), (1.0, 8.5)])
def test_make_grid_rejects_bad_input(side, points):
    with pytest.raises(ParameterError):
        Grid2D(side, points)


def test_points_are_strictly_interior():
    grid = make_grid(2.0, 8)
    axis = grid.axis(0)
    assert axis[0] == pytest.approx(grid.spacing)
    assert axis[-1] == pytest.approx(2.0 - grid.spacing)
    x, y = grid.mesh()
    assert x.shape == (8, 8)
    # indexed [i_x, i_y]
    assert x[3, 0] == pytest.approx(4 * grid.spacing)
    assert y[0, 3] == pytest.approx(4 * grid.spacing)


def test_constant_quadrature_misses_only_the_boundary_strip():
    grid = make_grid(10.0, 255)
    one = Wavefunction(grid, np.ones(grid.shape))
    value = inner_product(one, one)
    assert value == pytest.approx(255 * 255 * grid.cell_area, rel=1e-14)
    assert value == pytest.approx(100.0, rel=2.0 / 256 + 1e-3)


def test_normalized_field_has_unit_norm():
    grid = make_grid(3.0, 40)
    rng = np.random.default_rng(3)
    psi = normalize(Wavefunction(grid, rng.standard_normal(grid.shape)))
    assert inner_product(psi, psi) == pytest.approx(1.0, abs=1e-10)


def test_constant_field_normalizes_to_uniform_amplitude():
    grid = make_grid(4.0, 20)
    psi = normalize(Wavefunction(grid, np.full(grid.shape, 2.0)))
    assert np.ptp(psi.values) == 0.0
    assert np.sum(psi.values ** 2) * grid.cell_area == pytest.approx(1.0, abs=1e-12)


def test_zero_field_cannot_be_normalized():
    grid = make_grid(1.0, 8)
    with pytest.raises(ParameterError):
        normalize(Wavefunction(grid, np.zeros(grid.shape)))


def test_grid_mismatch_is_rejected():
    f = Wavefunction(make_grid(1.0, 8), np.ones((8, 8)))
    g = Wavefunction(make_grid(1.0, 9), np.ones((9, 9)))
    with pytest.raises(GridMismatchError):
        inner_product(f, g)


def test_quadrature_error_is_second_order():
    width = 3.0
    exact = (2.0 * width / np.pi) ** 2

    def error(points):
        grid = make_grid(width, points)
        x, y = grid.mesh()
        f = Wavefunction(grid, np.sin(np.pi * x / width) * np.sin(np.pi * y / width))
        one = Wavefunction(grid, np.ones(grid.shape))
        return abs(inner_product(f, one) - exact)

    ratio = error(31) / error(63)
    assert 3.8 < ratio < 4.2


def test_fields_are_read_only():
    grid = make_grid(1.0, 8)
    field = ScalarField(grid, np.ones(grid.shape))
    with pytest.raises(ValueError):
        field.values[0, 0] = 2.0


def test_scalar_field_rejects_nan():
    grid = make_grid(1.0, 8)
    values = np.ones(grid.shape)
    values[2, 2] = np.nan
    with pytest.raises(ParameterError):
        ScalarField(grid, values)


def test_field_file_layout(tmp_path):
    grid = make_grid(2.5, 9)
    values = np.arange(81, dtype=float).reshape(9, 9)
    path = write_field(tmp_path / "v.llf", ScalarField(grid, values))
    raw = path.read_bytes()
    assert raw[:4] == b"LLF1"
    assert len(raw) == 4 + 4 + 8 + 81 * 8
    # row-major: second stored value is [0, 1]
    assert np.frombuffer(raw, dtype="<f8", offset=16)[1] == values[0, 1]
    back = read_field(path, ScalarField)
    assert back.grid == grid
    assert_allclose(back.values, values, rtol=0, atol=0)


def test_field_file_with_bad_magic_is_rejected(tmp_path):
    path = tmp_path / "bad.llf"
    path.write_bytes(b"XXXX" + b"\0" * 12)
    with pytest.raises(ParameterError):
        read_field(path)


def test_norm_of_box_mode():
    grid = make_grid(5.0, 49)
    x, y = grid.mesh()
    psi = Wavefunction(grid, (2.0 / 5.0) * np.sin(np.pi * x / 5.0) * np.sin(2 * np.pi * y / 5.0))
    assert norm(psi) == pytest.approx(1.0, abs=1e-12)
