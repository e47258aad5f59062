"""Real functions on a periodic d-dimensional lattice and their spectra.

Cell k sits at displacement k*h taken by minimal image, so index 0 is the
origin. Integrals are Riemann sums (sum * h^d) and convolutions are periodic,
computed through scipy.fft.
"""
import csv
import logging
import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import fft

from app.errors import GeometryMismatch, GuardViolation, OutputError
from app.model import ConnectionFunction

logger = logging.getLogger(__name__)

fft_workers = int(os.getenv("RCM_THREADS", "1"))

_BINARY_HEADER = struct.Struct("<qqd")


def set_fft_workers(workers: int):
    global fft_workers
    fft_workers = max(1, int(workers))


class GridGeometry(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    dimension: int = Field(1, ge=1)
    cells: int = Field(..., ge=2)
    spacing: float = Field(..., gt=0)

    @field_validator("cells")
    @classmethod
    def _power_of_two(cls, value: int) -> int:
        if value & (value - 1):
            raise ValueError(f"cells per axis must be a power of two, got {value}")
        return value

    @property
    def shape(self):
        return (self.cells,) * self.dimension

    @property
    def length(self) -> float:
        return self.cells * self.spacing

    @property
    def cell_volume(self) -> float:
        return self.spacing ** self.dimension

    def axis_offsets(self) -> np.ndarray:
        """Signed integer offset of every index along one axis"""
        k = np.arange(self.cells)
        return np.where(k < self.cells // 2, k, k - self.cells)

    def integer_offsets(self) -> np.ndarray:
        """Integer offsets of all cells, shape (*shape, d)"""
        axes = np.meshgrid(*([self.axis_offsets()] * self.dimension), indexing="ij")
        return np.stack(axes, axis=-1)

    def coordinates(self) -> np.ndarray:
        return self.integer_offsets() * self.spacing

    def radii(self) -> np.ndarray:
        offsets = self.integer_offsets()
        return self.spacing * np.sqrt(np.sum(offsets.astype(float) ** 2, axis=-1))

    def index_of(self, x) -> tuple:
        """Index of the cell nearest to displacement x"""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if x.shape != (self.dimension,):
            raise ValueError(f"expected a {self.dimension}-vector, got {x.tolist()}")
        return tuple(int(k) % self.cells for k in np.round(x / self.spacing))

    def check_support(self, radius: float):
        if self.length < 2 * radius:
            raise GuardViolation(
                f"grid length {self.length} is shorter than twice the support radius {radius}",
                {"length": self.length, "support_radius": radius},
            )

    def angular_frequencies(self) -> np.ndarray:
        """Angular frequency vector of every spectral coefficient, shape (*shape, d)"""
        w = 2 * np.pi * fft.fftfreq(self.cells, d=self.spacing)
        axes = np.meshgrid(*([w] * self.dimension), indexing="ij")
        return np.stack(axes, axis=-1)


@dataclass(frozen=True)
class GridFunction:
    geometry: GridGeometry
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != self.geometry.shape:
            raise GeometryMismatch(f"values of shape {values.shape} do not match grid {self.geometry.shape}")
        if not np.all(np.isfinite(values)):
            raise GuardViolation("grid function values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def with_values(self, values: np.ndarray) -> "GridFunction":
        return replace(self, values=values)

    def integral(self) -> float:
        return float(self.values.sum() * self.geometry.cell_volume)

    def l1_norm(self) -> float:
        return float(np.abs(self.values).sum() * self.geometry.cell_volume)

    def sup_norm(self) -> float:
        return float(np.abs(self.values).max())

    def value_at(self, x) -> float:
        return float(self.values[self.geometry.index_of(x)])

    def reflected(self) -> "GridFunction":
        """x -> f(-x)"""
        axes = tuple(range(self.geometry.dimension))
        return self.with_values(np.roll(np.flip(self.values, axis=axes), 1, axis=axes))

    def is_even(self, tol: float = 1e-10) -> bool:
        scale = max(1.0, self.sup_norm())
        return bool(np.max(np.abs(self.values - self.reflected().values)) <= tol * scale)

    def boundary_mass(self, fraction: float = 0.5) -> float:
        """L1 mass in cells farther than fraction * (half length) from the origin in max-norm"""
        reach = np.max(np.abs(self.geometry.integer_offsets()), axis=-1) * self.geometry.spacing
        outside = reach > fraction * self.geometry.length / 2
        return float(np.abs(self.values[outside]).sum() * self.geometry.cell_volume)

    def spectral(self) -> "SpectralFunction":
        coefficients = fft.fftn(self.values, workers=fft_workers) * self.geometry.cell_volume
        return SpectralFunction(self.geometry, coefficients)

    def _check_same(self, other: "GridFunction"):
        if other.geometry != self.geometry:
            raise GeometryMismatch(f"grid geometries differ: {self.geometry} vs {other.geometry}")

    def __add__(self, other: "GridFunction") -> "GridFunction":
        self._check_same(other)
        return self.with_values(self.values + other.values)

    def __sub__(self, other: "GridFunction") -> "GridFunction":
        self._check_same(other)
        return self.with_values(self.values - other.values)

    def __mul__(self, scalar: float) -> "GridFunction":
        return self.with_values(self.values * float(scalar))

    __rmul__ = __mul__

    def __neg__(self) -> "GridFunction":
        return self.with_values(-self.values)


@dataclass(frozen=True)
class SpectralFunction:
    """Discrete Fourier coefficients scaled by h^d, approximating the continuous transform"""

    geometry: GridGeometry
    coefficients: np.ndarray

    def max_imag_ratio(self) -> float:
        modulus = np.abs(self.coefficients).max()
        if modulus == 0:
            return 0.0
        return float(np.abs(self.coefficients.imag).max() / modulus)

    def to_grid(self) -> GridFunction:
        values = fft.ifftn(self.coefficients, workers=fft_workers).real / self.geometry.cell_volume
        return GridFunction(self.geometry, values)


def zeros(geometry: GridGeometry) -> GridFunction:
    return GridFunction(geometry, np.zeros(geometry.shape))


def delta(geometry: GridGeometry) -> GridFunction:
    """Discrete identity for convolve: 1/h^d at the origin cell"""
    values = np.zeros(geometry.shape)
    values[(0,) * geometry.dimension] = 1.0 / geometry.cell_volume
    return GridFunction(geometry, values)


def grid_from_radial(profile, geometry: GridGeometry) -> GridFunction:
    """Evaluate a radial profile (connection function or RadialProfile) at every cell"""
    if isinstance(profile, ConnectionFunction):
        if profile.dimension != geometry.dimension:
            raise GeometryMismatch(
                f"connection function has dimension {profile.dimension}, grid has {geometry.dimension}")
        support = profile.truncation_radius
    else:
        support = profile.support_radius
    geometry.check_support(support)
    return GridFunction(geometry, profile.radial(geometry.radii()))


def convolve(fg: GridFunction, g: GridFunction) -> GridFunction:
    """Periodic convolution scaled by h^d, i.e. a discretization of the integral of f(x-y) g(y)"""
    fg._check_same(g)
    product = fft.fftn(fg.values, workers=fft_workers) * fft.fftn(g.values, workers=fft_workers)
    values = fft.ifftn(product, workers=fft_workers).real * fg.geometry.cell_volume
    return GridFunction(fg.geometry, values)


def write_binary(g: GridFunction, path: Union[str, Path]):
    """Header (d, N as int64, h as float64, little endian) then float64 values, row-major"""
    geometry = g.geometry
    try:
        with open(path, "wb") as handle:
            handle.write(_BINARY_HEADER.pack(geometry.dimension, geometry.cells, geometry.spacing))
            handle.write(np.ascontiguousarray(g.values, dtype="<f8").tobytes(order="C"))
    except OSError as e:
        raise OutputError(f"cannot write grid to {path}: {e}")


def read_binary(path: Union[str, Path]) -> GridFunction:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise OutputError(f"cannot read grid from {path}: {e}")
    if len(raw) < _BINARY_HEADER.size:
        raise OutputError(f"{path} is too short for a grid header")
    dimension, cells, spacing = _BINARY_HEADER.unpack_from(raw)
    geometry = GridGeometry(dimension=dimension, cells=cells, spacing=spacing)
    values = np.frombuffer(raw, dtype="<f8", offset=_BINARY_HEADER.size)
    if values.size != cells ** dimension:
        raise OutputError(f"{path} holds {values.size} values, expected {cells ** dimension}")
    return GridFunction(geometry, values.reshape(geometry.shape).astype(float))


def write_csv(g: GridFunction, path: Union[str, Path]):
    """Columns index, coordinate, value; coordinates of d > 1 grids are space separated"""
    geometry = g.geometry
    coordinates = geometry.coordinates().reshape(-1, geometry.dimension)
    values = g.values.reshape(-1)
    try:
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["index", "coordinate", "value"])
            for index, (coordinate, value) in enumerate(zip(coordinates, values)):
                writer.writerow([index, " ".join(f"{c:.17g}" for c in coordinate), f"{value:.17g}"])
    except OSError as e:
        raise OutputError(f"cannot write grid to {path}: {e}")


def read_csv(path: Union[str, Path], geometry: GridGeometry) -> GridFunction:
    try:
        with open(path, newline="", encoding="utf-8") as handle:
            rows = list(csv.DictReader(handle))
    except OSError as e:
        raise OutputError(f"cannot read grid from {path}: {e}")
    values = np.zeros(geometry.cells ** geometry.dimension)
    if len(rows) != values.size:
        raise OutputError(f"{path} has {len(rows)} rows, expected {values.size}")
    for row in rows:
        values[int(row["index"])] = float(row["value"])
    return GridFunction(geometry, values.reshape(geometry.shape))
