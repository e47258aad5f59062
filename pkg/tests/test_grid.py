import struct

import numpy as np
import pytest

from app.errors import GeometryMismatch, GuardViolation, OutputError
from app.grid import (GridFunction, GridGeometry, convolve, delta, grid_from_radial, read_binary, read_csv,
                      write_binary, write_csv, zeros)
from app.model import ConnectionFunction

H = 1.0 / 64


@pytest.fixture
def line():
    return GridGeometry(dimension=1, cells=1024, spacing=H)


@pytest.fixture
def phi(line):
    return grid_from_radial(ConnectionFunction.gilbert(1.0), line)


def test_cells_must_be_power_of_two():
    with pytest.raises(ValueError):
        GridGeometry(cells=1000, spacing=0.1)


def test_index_zero_is_origin(line):
    offsets = line.axis_offsets()
    assert offsets[0] == 0
    assert offsets[1] == 1
    assert offsets[-1] == -1
    assert line.index_of(-H) == (1023,)


def test_gilbert_grid_is_closed_ball(phi):
    # lattice points k*h with |k| <= 64
    assert phi.values.sum() == 129
    assert phi.value_at(1.0) == 1.0
    assert phi.value_at(-1.0) == 1.0
    assert phi.value_at(1.0 + H) == 0.0
    assert phi.integral() == pytest.approx(2.0, abs=2 * H)


def test_support_guard():
    short = GridGeometry(cells=16, spacing=0.1)
    with pytest.raises(GuardViolation):
        grid_from_radial(ConnectionFunction.gilbert(1.0), short)
    plane = GridGeometry(dimension=2, cells=64, spacing=0.1)
    with pytest.raises(GeometryMismatch):
        grid_from_radial(ConnectionFunction.gilbert(1.0), plane)


def test_delta_is_convolution_identity(phi, line):
    assert np.allclose(convolve(delta(line), phi).values, phi.values, atol=1e-12)


def test_self_convolution_of_indicator_is_triangle(phi):
    # phi * phi(x) = (2 - |x|)_+ for the unit interval indicator
    conv = convolve(phi, phi)
    for x in (0.0, 0.5, 1.0, 1.5):
        assert conv.value_at(x) == pytest.approx(2.0 - x, abs=2 * H)
    assert conv.value_at(2.5) == pytest.approx(0.0, abs=1e-12)
    assert conv.integral() == pytest.approx(phi.integral() ** 2, rel=1e-12)


def test_spectrum_at_zero_is_integral(phi):
    spectrum = phi.spectral()
    assert spectrum.coefficients[0].real == pytest.approx(phi.integral())
    assert spectrum.max_imag_ratio() < 1e-12
    assert np.allclose(spectrum.to_grid().values, phi.values, atol=1e-12)


def test_reflection_and_evenness(line, phi):
    assert phi.is_even()
    ramp = np.where(line.axis_offsets() > 0, 1.0, 0.0)
    odd = GridFunction(line, ramp)
    assert not odd.is_even()
    assert odd.reflected().value_at(-H) == 1.0
    assert odd.reflected().value_at(H) == 0.0


def test_boundary_mass(phi, line):
    assert phi.boundary_mass() == 0.0
    flat = GridFunction(line, np.ones(line.shape))
    assert flat.boundary_mass() == pytest.approx(flat.l1_norm() / 2, abs=2 * H)


def test_arithmetic_checks_geometry(phi):
    other = zeros(GridGeometry(cells=1024, spacing=2 * H))
    with pytest.raises(GeometryMismatch):
        phi + other
    assert (2 * phi - phi).values.tolist() == phi.values.tolist()
    assert (-phi).integral() == -phi.integral()


def test_values_are_validated(line):
    with pytest.raises(GeometryMismatch):
        GridFunction(line, np.zeros(10))
    with pytest.raises(GuardViolation):
        GridFunction(line, np.full(line.shape, np.nan))


def test_binary_layout(tmp_path, phi):
    path = tmp_path / "phi.bin"
    write_binary(phi, path)
    raw = path.read_bytes()
    assert struct.unpack_from("<qqd", raw) == (1, 1024, H)
    assert len(raw) == 24 + 8 * 1024
    back = read_binary(path)
    assert back.geometry == phi.geometry
    assert np.array_equal(back.values, phi.values)


def test_truncated_binary_is_rejected(tmp_path, phi):
    path = tmp_path / "short.bin"
    write_binary(phi, path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(OutputError):
        read_binary(path)


def test_csv_grid(tmp_path, line, phi):
    path = tmp_path / "phi.csv"
    write_csv(phi, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "index,coordinate,value"
    assert lines[1] == "0,0,1"
    assert len(lines) == 1025
    assert np.array_equal(read_csv(path, line).values, phi.values)
    with pytest.raises(OutputError):
        read_csv(path, GridGeometry(cells=512, spacing=H))


def test_two_dimensional_convolution_mass():
    plane = GridGeometry(dimension=2, cells=128, spacing=1.0 / 16)
    disc = grid_from_radial(ConnectionFunction.gilbert(1.0, dimension=2), plane)
    assert disc.integral() == pytest.approx(np.pi, rel=0.02)
    assert convolve(disc, disc).integral() == pytest.approx(disc.integral() ** 2, rel=1e-10)
