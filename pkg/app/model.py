"""Connection functions, finite boxes and samples of the random connection model.

A sample is a Poisson(t * L^d) cloud of uniform background points in the box
``[-L/2, L/2)^d`` with a few deterministic pins in front (index 0, 1, ...).
Every unordered pair {i, j} is joined independently with probability
phi(x_j - x_i); the uniform deciding a pair is a hash of (seed, stream, i, j),
so the outcome does not depend on the order in which pairs are visited.
"""
import itertools
import logging
import math
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import FrozenSet, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import integrate
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from app.errors import GuardViolation, NumericalPreconditionError, QuadratureError
from app.metrics import metrics

logger = logging.getLogger(__name__)

TRUNCATION_EPSILON = 1e-12
# closed-ball tolerance so that lattice points k*h == R count as inside
EDGE_TOLERANCE = 1e-12
MASS_RTOL = 1e-10


def ball_volume(dimension: int, radius: float = 1.0) -> float:
    """Volume of the d-ball of the given radius"""
    return math.pi ** (dimension / 2) / math.gamma(dimension / 2 + 1) * radius ** dimension


def sphere_area(dimension: int) -> float:
    """Surface area of the unit sphere in R^d (2 for d = 1)"""
    return 2 * math.pi ** (dimension / 2) / math.gamma(dimension / 2)


class ConnectionFunction(BaseModel):
    """Radially symmetric connection probability phi"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["gilbert", "exponential", "radial-table"]
    dimension: int = Field(1, ge=1)
    radius: Optional[float] = Field(None, gt=0)
    rate: Optional[float] = Field(None, gt=0)
    table: Optional[Tuple[Tuple[float, float], ...]] = None

    @model_validator(mode="after")
    def _check_params(self):
        if self.kind == "gilbert" and self.radius is None:
            raise ValueError("gilbert connection function needs a radius")
        if self.kind == "exponential" and self.rate is None:
            raise ValueError("exponential connection function needs a rate")
        if self.kind == "radial-table":
            if not self.table or len(self.table) < 2:
                raise ValueError("radial-table needs at least two (radius, value) pairs")
            radii = [r for r, _ in self.table]
            if radii[0] < 0 or any(b <= a for a, b in zip(radii, radii[1:])):
                raise ValueError("radial-table radii must be non-negative and strictly increasing")
            if any(not 0.0 <= v <= 1.0 for _, v in self.table):
                raise ValueError("radial-table values must lie in [0, 1]")
            if all(v == 0.0 for _, v in self.table):
                raise ValueError("radial-table must have positive mass")
        return self

    @classmethod
    def gilbert(cls, radius: float = 1.0, dimension: int = 1) -> "ConnectionFunction":
        return cls(kind="gilbert", radius=radius, dimension=dimension)

    @classmethod
    def exponential(cls, rate: float = 1.0, dimension: int = 1) -> "ConnectionFunction":
        return cls(kind="exponential", rate=rate, dimension=dimension)

    @classmethod
    def radial_table(cls, pairs: Sequence[Tuple[float, float]], dimension: int = 1) -> "ConnectionFunction":
        return cls(kind="radial-table", table=tuple((float(r), float(v)) for r, v in pairs),
                   dimension=dimension)

    @property
    def truncation_radius(self) -> float:
        if self.kind == "gilbert":
            return self.radius
        if self.kind == "exponential":
            return math.log(1.0 / TRUNCATION_EPSILON) / self.rate
        return self.table[-1][0]

    @property
    def length_scale(self) -> float:
        """Natural unit of length (R, 1/a, or the table's last radius)"""
        if self.kind == "gilbert":
            return self.radius
        if self.kind == "exponential":
            return 1.0 / self.rate
        return self.table[-1][0]

    @property
    def mass(self) -> float:
        return mass_phi(self)

    def breakpoints(self) -> Tuple[float, ...]:
        """Radii where phi is not smooth"""
        if self.kind == "gilbert":
            return (self.radius,)
        if self.kind == "exponential":
            return (0.0,)
        return tuple(r for r, _ in self.table)

    def radial(self, r) -> np.ndarray:
        """phi as a function of the distance |x|"""
        r = np.abs(np.asarray(r, dtype=float))
        if self.kind == "gilbert":
            return (r <= self.radius * (1.0 + EDGE_TOLERANCE)).astype(float)
        cutoff = self.truncation_radius
        if self.kind == "exponential":
            return np.where(r <= cutoff, np.exp(-self.rate * r), 0.0)
        radii = np.array([p[0] for p in self.table])
        values = np.array([p[1] for p in self.table])
        out = np.interp(r, radii, values, right=0.0)
        return np.where(r <= cutoff, out, 0.0)

    def __call__(self, x):
        return eval_phi(self, x)


def _norm(x: np.ndarray, dimension: int) -> np.ndarray:
    if x.ndim == 0:
        return np.abs(x)
    if x.shape[-1] == dimension:
        return np.linalg.norm(x, axis=-1)
    if dimension == 1:
        return np.abs(x)
    raise ValueError(f"expected vectors of dimension {dimension}, got shape {x.shape}")


def eval_phi(f: ConnectionFunction, x):
    """Connection probability for a displacement x (scalar or array of d-vectors)"""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("displacement must be finite")
    value = f.radial(_norm(x, f.dimension))
    if np.ndim(value) == 0:
        return float(value)
    if x.ndim == 1 and x.shape[0] == f.dimension and f.dimension > 1:
        return float(value)
    return value


@lru_cache(maxsize=64)
def mass_phi(f: ConnectionFunction) -> float:
    """Total mass m_phi = integral of phi over R^d"""
    d = f.dimension
    if f.kind == "gilbert":
        return ball_volume(d, f.radius)
    if f.kind == "exponential" and d == 1:
        return 2.0 / f.rate

    area = sphere_area(d)
    cutoff = f.truncation_radius
    points = [p for p in f.breakpoints() if 0.0 < p < cutoff]
    value, abserr = integrate.quad(
        lambda r: area * r ** (d - 1) * float(f.radial(r)),
        0.0, cutoff, points=points or None, limit=500, epsabs=0.0, epsrel=1e-12,
    )
    if not value > 0 or abserr > MASS_RTOL * abs(value):
        raise QuadratureError(
            f"radial quadrature for m_phi did not converge: value={value!r}, achieved error={abserr!r}",
            {"value": value, "abserr": abserr},
        )
    return value


def sample_displacement(f: ConnectionFunction, size: int, gen: np.random.Generator) -> np.ndarray:
    """Draw displacements from the probability density phi / m_phi, shape (size, d)"""
    d = f.dimension
    if f.kind == "gilbert":
        r = f.radius * gen.random(size) ** (1.0 / d)
    elif f.kind == "exponential":
        r = gen.gamma(shape=d, scale=1.0 / f.rate, size=size)
    else:
        grid = np.linspace(0.0, f.truncation_radius, 4097)
        density = f.radial(grid) * grid ** (d - 1)
        cdf = integrate.cumulative_trapezoid(density, grid, initial=0.0)
        r = np.interp(gen.random(size) * cdf[-1], cdf, grid)
    if d == 1:
        sign = np.where(gen.random(size) < 0.5, -1.0, 1.0)
        return (sign * r)[:, None]
    direction = gen.standard_normal((size, d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    return direction * r[:, None]


class BoxGeometry(BaseModel):
    """The box [-L/2, L/2)^d, periodic or free"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    dimension: int = Field(1, ge=1)
    side_length: float = Field(..., gt=0)
    boundary: Literal["periodic", "free"] = "periodic"

    @property
    def volume(self) -> float:
        return self.side_length ** self.dimension

    @property
    def periodic(self) -> bool:
        return self.boundary == "periodic"

    def contains(self, points: np.ndarray) -> np.ndarray:
        half = self.side_length / 2
        points = np.asarray(points, dtype=float).reshape(-1, self.dimension)
        return np.all((points >= -half) & (points < half), axis=1)

    def displacement(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """b - a, by minimal image when the box is periodic"""
        diff = np.asarray(b, dtype=float) - np.asarray(a, dtype=float)
        if self.periodic:
            L = self.side_length
            diff = diff - L * np.round(diff / L)
        return diff

    def check_connection(self, f: ConnectionFunction):
        if f.dimension != self.dimension:
            raise GuardViolation(
                f"connection function has dimension {f.dimension}, box has {self.dimension}")
        if not self.side_length > 2 * f.truncation_radius:
            raise GuardViolation(
                f"box side {self.side_length} must exceed twice the truncation radius "
                f"{f.truncation_radius}",
                {"side_length": self.side_length, "truncation_radius": f.truncation_radius},
            )


_SPLITMIX_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SPLITMIX_M1 = np.uint64(0xBF58476D1CE4E5B9)
_SPLITMIX_M2 = np.uint64(0x94D049BB133111EB)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = z + _SPLITMIX_GAMMA
    z = (z ^ (z >> np.uint64(30))) * _SPLITMIX_M1
    z = (z ^ (z >> np.uint64(27))) * _SPLITMIX_M2
    return z ^ (z >> np.uint64(31))


class RngSpec(BaseModel):
    """Master seed plus replicate stream; (seed, stream) fixes a sample bit for bit"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    seed: int = Field(..., ge=0, lt=2 ** 64)
    stream: int = Field(0, ge=0, lt=2 ** 64)

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, self.stream])))

    def child(self, *keys: int) -> "RngSpec":
        """Independent stream key for a sub-task (probe index, criterion number, ...)"""
        state = np.random.SeedSequence([self.seed, *keys]).generate_state(1, dtype=np.uint64)
        return RngSpec(seed=int(state[0]), stream=self.stream)

    def with_stream(self, stream: int) -> "RngSpec":
        return RngSpec(seed=self.seed, stream=stream)

    def pair_uniforms(self, i: np.ndarray, j: np.ndarray) -> np.ndarray:
        """Uniforms in [0, 1) keyed by (seed, stream, min(i,j), max(i,j))"""
        i = np.asarray(i, dtype=np.uint64)
        j = np.asarray(j, dtype=np.uint64)
        lo, hi = np.minimum(i, j), np.maximum(i, j)
        state = _mix64(np.full(lo.shape, self.seed, dtype=np.uint64))
        state = _mix64(state ^ np.uint64(self.stream))
        state = _mix64(state ^ lo)
        state = _mix64(state ^ hi)
        return (state >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


@dataclass(frozen=True)
class RcmSample:
    points: np.ndarray
    pinned_count: int
    edges: np.ndarray
    box: BoxGeometry
    rng: RngSpec
    intensity: float

    @property
    def size(self) -> int:
        return int(self.points.shape[0])

    def adjacency_matrix(self) -> csr_matrix:
        k = self.size
        if len(self.edges) == 0:
            return csr_matrix((k, k), dtype=np.int8)
        rows = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        cols = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        return csr_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(k, k))

    @cached_property
    def labels(self) -> np.ndarray:
        if self.size == 0:
            return np.zeros(0, dtype=np.int32)
        _, labels = connected_components(self.adjacency_matrix(), directed=False)
        return labels

    @cached_property
    def cluster_sizes(self) -> np.ndarray:
        """Size of every cluster, indexed by cluster label"""
        return np.bincount(self.labels) if self.size else np.zeros(0, dtype=np.int64)

    @property
    def cluster_count(self) -> int:
        return int(len(self.cluster_sizes))

    def cluster_size_of(self, vertex_index: int) -> int:
        return int(self.cluster_sizes[self.labels[vertex_index]])

    def connected(self, a: int, b: int) -> bool:
        return bool(self.labels[a] == self.labels[b])

    def degree(self, vertex_index: int) -> int:
        if len(self.edges) == 0:
            return 0
        return int(np.count_nonzero(self.edges == vertex_index))

    def touches_boundary(self, vertex_index: int, margin: float) -> bool:
        """Whether the cluster of the vertex comes within `margin` of the box faces.

        For a periodic box the faces are those of the half-box around the vertex:
        a cluster reaching that far may wrap onto its own periodic image.
        """
        members = np.nonzero(self.labels == self.labels[vertex_index])[0]
        half = self.box.side_length / 2
        if self.box.periodic:
            offsets = self.box.displacement(self.points[vertex_index], self.points[members])
            return bool(np.any(np.abs(offsets) >= half - margin))
        return bool(np.any(np.abs(self.points[members]) >= half - margin))


def candidate_pairs(points: np.ndarray, box: BoxGeometry, cutoff: float,
                    method: Literal["cells", "brute"] = "cells") -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All pairs i < j within `cutoff`, sorted lexicographically, with their distances"""
    k = points.shape[0]
    if k < 2:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, np.zeros(0)
    if method == "brute":
        i, j = np.triu_indices(k, 1)
    else:
        i, j = _cell_list_pairs(points, box, cutoff)
    dist = np.linalg.norm(box.displacement(points[i], points[j]), axis=1)
    keep = dist <= cutoff * (1.0 + EDGE_TOLERANCE)
    return i[keep].astype(np.int64), j[keep].astype(np.int64), dist[keep]


def _cell_list_pairs(points: np.ndarray, box: BoxGeometry, cutoff: float) -> Tuple[np.ndarray, np.ndarray]:
    k, d = points.shape
    L = box.side_length
    # cells never narrower than the cutoff, and not many more than points
    n_cells = max(1, min(int(L // cutoff), int(np.ceil(k ** (1.0 / d))) + 1))
    side = L / n_cells
    shape = (n_cells,) * d
    cell = np.clip(np.floor((points + L / 2) / side).astype(np.int64), 0, n_cells - 1)
    flat = np.ravel_multi_index(tuple(cell.T), shape)
    order = np.argsort(flat, kind="stable")
    counts = np.bincount(flat, minlength=n_cells ** d)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))

    found_i, found_j = [], []
    for offset in itertools.product((-1, 0, 1), repeat=d):
        neighbour = cell + np.asarray(offset)
        if box.periodic:
            neighbour %= n_cells
            src = np.arange(k)
        else:
            src = np.nonzero(np.all((neighbour >= 0) & (neighbour < n_cells), axis=1))[0]
            neighbour = neighbour[src]
        target = np.ravel_multi_index(tuple(neighbour.T), shape)
        per_source = counts[target]
        total = int(per_source.sum())
        if total == 0:
            continue
        position = np.arange(total) - np.repeat(np.cumsum(per_source) - per_source, per_source)
        found_i.append(np.repeat(src, per_source))
        found_j.append(order[np.repeat(starts[target], per_source) + position])

    i = np.concatenate(found_i)
    j = np.concatenate(found_j)
    keep = i < j
    # with fewer than three cells per axis the periodic neighbours repeat
    key = np.unique(i[keep] * k + j[keep])
    return key // k, key % k


def sample_rcm(t: float, f: ConnectionFunction, box: BoxGeometry, pins: Sequence, rng: RngSpec,
               pair_method: Literal["cells", "brute"] = "cells") -> RcmSample:
    """Sample the RCM in the box with the given pins placed first"""
    if not t >= 0:
        raise NumericalPreconditionError(f"intensity must be non-negative, got {t}")
    box.check_connection(f)
    d = box.dimension
    pins = np.asarray(pins, dtype=float).reshape(-1, d)
    if pins.size and not np.all(box.contains(pins)):
        raise GuardViolation("pin outside box", {"pins": pins.tolist(), "side_length": box.side_length})

    gen = rng.generator()
    count = int(gen.poisson(t * box.volume)) if t > 0 else 0
    half = box.side_length / 2
    background = gen.uniform(-half, half, size=(count, d))
    points = np.vstack([pins, background]) if count else pins.copy()

    i, j, dist = candidate_pairs(points, box, f.truncation_radius, pair_method)
    if len(i):
        keep = rng.pair_uniforms(i, j) < f.radial(dist)
        edges = np.column_stack([i[keep], j[keep]])
    else:
        edges = np.zeros((0, 2), dtype=np.int64)

    metrics.increment("rcm_samples")
    return RcmSample(points=points, pinned_count=len(pins), edges=edges, box=box, rng=rng, intensity=t)


def cluster_of(sample: RcmSample, vertex_index: int) -> FrozenSet[int]:
    """Connected component of the vertex in the sampled graph"""
    if not 0 <= vertex_index < sample.size:
        raise IndexError(f"vertex {vertex_index} not in sample of size {sample.size}")
    label = sample.labels[vertex_index]
    return frozenset(int(v) for v in np.nonzero(sample.labels == label)[0])
