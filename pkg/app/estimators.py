"""Monte Carlo estimators on finite-box samples, plus exact small-cluster formulas.

Every replicate r of a probe draws its sample from RngSpec(seed', stream=r),
where seed' is derived from the master seed and the probe, so a table is a
pure function of (config, seed) regardless of how replicates are split
across threads.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy import integrate

from app.errors import NumericalPreconditionError, QuadratureError, SubcriticalGuardError
from app.metrics import metrics
from app.model import (BoxGeometry, ConnectionFunction, RngSpec, ball_volume, eval_phi, mass_phi,
                       sample_rcm)

logger = logging.getLogger(__name__)

BATCHES = 32
BOUNDARY_FRACTION_THRESHOLD = 0.01
EXACT_RTOL = 1e-6
CHUNK_SIZE = 1024


class EstimateRow(BaseModel):
    input: str
    estimate: float
    stderr: float = Field(..., ge=0)
    n: int = Field(..., ge=0)


class EstimateTable(BaseModel):
    kind: str
    rows: List[EstimateRow]
    metadata: Dict[str, Any] = {}

    def estimates(self) -> np.ndarray:
        return np.array([row.estimate for row in self.rows])

    def errors(self) -> np.ndarray:
        return np.array([row.stderr for row in self.rows])

    def row(self, label: str) -> EstimateRow:
        for row in self.rows:
            if row.input == label:
                return row
        raise KeyError(label)


@dataclass(frozen=True)
class RadialProfile:
    """Piecewise constant radial function: bin k is (edges[k], edges[k+1]], bin 0 includes 0"""

    edges: np.ndarray
    values: np.ndarray
    counts: np.ndarray
    errors: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=float)
        if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0) or edges[0] != 0:
            raise ValueError("bin edges must start at 0 and increase strictly")
        if len(self.values) != len(edges) - 1 or not np.all(np.isfinite(self.values)):
            raise ValueError("need one finite value per bin")

    @property
    def support_radius(self) -> float:
        return float(self.edges[-1])

    @property
    def centres(self) -> np.ndarray:
        return (self.edges[:-1] + self.edges[1:]) / 2

    def radial(self, r) -> np.ndarray:
        r = np.abs(np.asarray(r, dtype=float))
        index = np.maximum(np.searchsorted(self.edges, r, side="left") - 1, 0)
        inside = r <= self.edges[-1]
        return np.where(inside, np.asarray(self.values)[np.minimum(index, len(self.values) - 1)], 0.0)


def format_point(x) -> str:
    return " ".join(f"{c:.17g}" for c in np.atleast_1d(np.asarray(x, dtype=float)))


def parse_point(text: str, dimension: int) -> np.ndarray:
    x = np.array([float(c) for c in text.split()])
    if x.shape != (dimension,):
        raise ValueError(f"expected a {dimension}-vector, got '{text}'")
    return x


def run_replicates(count: int, task: Callable[[int], Sequence[float]], workers: int = 1,
                   chunk_size: int = CHUNK_SIZE) -> np.ndarray:
    """task(r) for r in 0..count-1 as rows of an array, in replicate order"""
    chunks = [range(start, min(start + chunk_size, count)) for start in range(0, count, chunk_size)]

    def run(chunk):
        return np.array([task(r) for r in chunk], dtype=float).reshape(len(chunk), -1)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            parts = list(executor.map(run, chunks))
    else:
        parts = [run(chunk) for chunk in chunks]
    if not parts:
        return np.zeros((0, 1))
    return np.concatenate(parts)


def binomial_stderr(p: float, n: int) -> float:
    if n == 0:
        return 0.0
    return math.sqrt(max(p * (1 - p), 0.0) / n)


def batch_means(samples: np.ndarray, batches: int = BATCHES) -> Tuple[float, float]:
    """Mean and its batch-means standard error (plain error when there are too few samples)"""
    samples = np.asarray(samples, dtype=float)
    mean = float(samples.mean()) if samples.size else float("nan")
    if samples.size < 2 * batches:
        if samples.size < 2:
            return mean, 0.0
        return mean, float(samples.std(ddof=1) / math.sqrt(samples.size))
    means = np.array([chunk.mean() for chunk in np.array_split(samples, batches)])
    return mean, float(means.std(ddof=1) / math.sqrt(batches))


def _metadata(t: float, f: ConnectionFunction, box: BoxGeometry, rng: RngSpec, replicates: int,
              **extra) -> Dict[str, Any]:
    return {
        "t": t,
        "connection": f.model_dump(mode="json", exclude_none=True),
        "box": box.model_dump(mode="json"),
        "seed": rng.seed,
        "replicates": replicates,
        **extra,
    }


def _check_probe(box: BoxGeometry, x: np.ndarray):
    if not np.all(box.contains(x)):
        raise NumericalPreconditionError(f"displacement {x.tolist()} lies outside the box",
                                         {"x": x.tolist(), "side_length": box.side_length})


def _pairconn_hits(t, f, box, x, replicates, rng, workers) -> np.ndarray:
    origin = np.zeros(box.dimension)

    def task(r):
        sample = sample_rcm(t, f, box, [origin, x], rng.with_stream(r))
        return (float(sample.connected(0, 1)),)

    return run_replicates(replicates, task, workers)[:, 0]


def estimate_pairconn(t: float, f: ConnectionFunction, box: BoxGeometry, displacements: Sequence,
                      replicates: int, rng: RngSpec, workers: int = 1) -> EstimateTable:
    """Fraction of replicates with x in the cluster of 0, for pins {0, x}"""
    if not t >= 0:
        raise NumericalPreconditionError(f"intensity must be non-negative, got {t}")
    rows = []
    for index, x in enumerate(displacements):
        x = np.atleast_1d(np.asarray(x, dtype=float)).reshape(box.dimension)
        _check_probe(box, x)
        with metrics.timer("estimate_pairconn"):
            hits = _pairconn_hits(t, f, box, x, replicates, rng.child(1, index), workers)
        p = float(hits.mean()) if replicates else 0.0
        rows.append(EstimateRow(input=format_point(x), estimate=p, stderr=binomial_stderr(p, replicates),
                                n=replicates))
    return EstimateTable(kind="pairconn", rows=rows, metadata=_metadata(t, f, box, rng, replicates))


def profile_edges(bin_width: float, max_radius: float) -> np.ndarray:
    bins = int(math.ceil(max_radius / bin_width - 1e-9))
    return bin_width * np.arange(bins + 1)


def estimate_pairconn_profile(t: float, f: ConnectionFunction, box: BoxGeometry, bin_width: float,
                              max_radius: float, replicates: int, rng: RngSpec,
                              workers: int = 1) -> Tuple[RadialProfile, EstimateTable]:
    """Pair connectedness at the bin midpoints along the first axis"""
    edges = profile_edges(bin_width, max_radius)
    centres = (edges[:-1] + edges[1:]) / 2
    probes = np.zeros((len(centres), box.dimension))
    probes[:, 0] = centres
    table = estimate_pairconn(t, f, box, probes, replicates, rng, workers)
    table.metadata.update({"bin_width": bin_width, "max_radius": float(edges[-1])})
    profile = RadialProfile(edges=edges, values=table.estimates(),
                            counts=np.full(len(centres), replicates), errors=table.errors())
    return profile, table


def profile_from_table(table: EstimateTable, dimension: int = 1) -> RadialProfile:
    """Rebuild the radial profile of a pair connectedness table from its probe radii"""
    radii = np.array([np.linalg.norm(parse_point(row.input, dimension)) for row in table.rows])
    bin_width = table.metadata.get("bin_width")
    if bin_width is None:
        if len(radii) < 2:
            raise ValueError("cannot infer bin width from fewer than two probes")
        bin_width = float(radii[1] - radii[0])
    edges = bin_width * np.arange(len(radii) + 1)
    if not np.allclose(radii, (edges[:-1] + edges[1:]) / 2, rtol=1e-9, atol=1e-12):
        raise ValueError("table probes are not the midpoints of equal-width bins starting at 0")
    return RadialProfile(edges=edges, values=table.estimates(),
                         counts=np.array([row.n for row in table.rows]), errors=table.errors())


def integrate_profile(profile: RadialProfile, dimension: int) -> Tuple[float, float]:
    """Integral of the radial profile over R^d with its standard error"""
    shells = np.diff(ball_volume(dimension, 1.0) * profile.edges ** dimension)
    value = float(np.sum(profile.values * shells))
    error = float(np.sqrt(np.sum((profile.errors * shells) ** 2)))
    return value, error


def _size_rows(sizes: np.ndarray, classes: Sequence[int], replicates: int) -> List[EstimateRow]:
    rows = []
    for size in classes:
        p = float(np.count_nonzero(sizes == size)) / replicates if replicates else 0.0
        rows.append(EstimateRow(input=str(size), estimate=p, stderr=binomial_stderr(p, replicates),
                                n=replicates))
    overflow = float(np.count_nonzero(sizes > classes[-1])) / replicates if replicates else 0.0
    rows.append(EstimateRow(input="overflow", estimate=overflow,
                            stderr=binomial_stderr(overflow, replicates), n=replicates))
    return rows


def _cluster_sizes(t, f, box, replicates, rng, workers) -> np.ndarray:
    """Size of the cluster of a pin at the origin, and whether it reaches the box boundary"""
    origin = np.zeros((1, box.dimension))
    margin = f.truncation_radius

    def task(r):
        sample = sample_rcm(t, f, box, origin, rng.with_stream(r))
        return sample.cluster_size_of(0), float(sample.touches_boundary(0, margin))

    return run_replicates(replicates, task, workers)


def estimate_cluster_size_dist(t: float, f: ConnectionFunction, box: BoxGeometry, max_size: int,
                               replicates: int, rng: RngSpec, workers: int = 1) -> EstimateTable:
    """pmf of |C(0)| for sizes 1..max_size plus the overflow mass"""
    if not t >= 0:
        raise NumericalPreconditionError(f"intensity must be non-negative, got {t}")
    if max_size < 1:
        raise ValueError("max_size must be at least 1")
    with metrics.timer("estimate_cluster_size_dist"):
        sizes = _cluster_sizes(t, f, box, replicates, rng.child(2), workers)[:, 0]
    rows = _size_rows(sizes, list(range(1, max_size + 1)), replicates)
    return EstimateTable(kind="cluster-size", rows=rows,
                         metadata=_metadata(t, f, box, rng, replicates, max_size=max_size))


def estimate_pairconn_by_size(t: float, f: ConnectionFunction, box: BoxGeometry, x, max_size: int,
                              replicates: int, rng: RngSpec, workers: int = 1) -> EstimateTable:
    """P(x in C(0), |C(0)| = k) for k = 2..max_size plus overflow, pins {0, x}"""
    x = np.atleast_1d(np.asarray(x, dtype=float)).reshape(box.dimension)
    _check_probe(box, x)
    origin = np.zeros(box.dimension)
    seeded = rng.child(3)

    def task(r):
        sample = sample_rcm(t, f, box, [origin, x], seeded.with_stream(r))
        return (sample.cluster_size_of(0) if sample.connected(0, 1) else 0,)

    sizes = run_replicates(replicates, task, workers)[:, 0]
    rows = _size_rows(sizes, list(range(2, max(max_size, 2) + 1)), replicates)
    return EstimateTable(kind="pairconn-by-size", rows=rows,
                         metadata=_metadata(t, f, box, rng, replicates, x=x.tolist(), max_size=max_size))


@dataclass(frozen=True)
class MeanClusterEstimate:
    value: float
    stderr: float
    inverse_mean: float
    inverse_stderr: float
    replicates: int
    boundary_fraction: float
    boundary_flag: bool

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mean_cluster_size": self.value,
            "stderr": self.stderr,
            "mean_inverse_cluster_size": self.inverse_mean,
            "inverse_stderr": self.inverse_stderr,
            "replicates": self.replicates,
            "boundary_fraction": self.boundary_fraction,
            "boundary_flag": self.boundary_flag,
        }


def subcritical_guard(t: float, f: ConnectionFunction, bound: Optional[float] = None):
    """Refuse intensities at or above the asserted bound (default 1/m_phi)"""
    limit = bound if bound is not None else 1.0 / mass_phi(f)
    if not 0 <= t < limit:
        raise SubcriticalGuardError(
            f"intensity t = {t} is not below the subcritical bound {limit:.6g}; "
            "pass an explicit bound to override",
            {"t": t, "bound": limit},
        )


def estimate_mean_cluster_size(t: float, f: ConnectionFunction, box: BoxGeometry, replicates: int,
                               rng: RngSpec, workers: int = 1, subcritical_bound: Optional[float] = None,
                               boundary_threshold: float = BOUNDARY_FRACTION_THRESHOLD) -> MeanClusterEstimate:
    """E|C(0)| and E[1/|C(0)|] with batch-means errors, plus the boundary-touch fraction"""
    subcritical_guard(t, f, subcritical_bound)
    with metrics.timer("estimate_mean_cluster_size"):
        result = _cluster_sizes(t, f, box, replicates, rng.child(4), workers)
    sizes, touched = result[:, 0], result[:, 1]
    mean, stderr = batch_means(sizes)
    inverse, inverse_stderr = batch_means(1.0 / sizes)
    fraction = float(touched.mean()) if replicates else 0.0
    flag = fraction > boundary_threshold
    if flag:
        logger.warning(f"{fraction:.2%} of sampled clusters reach the box boundary "
                       f"(threshold {boundary_threshold:.2%}); finite-volume bias likely")
    return MeanClusterEstimate(value=mean, stderr=stderr, inverse_mean=inverse, inverse_stderr=inverse_stderr,
                               replicates=replicates, boundary_fraction=fraction, boundary_flag=flag)


@dataclass(frozen=True)
class ClusterDensityEstimate:
    density: float
    stderr: float
    replicates: int
    palm_density: Optional[float] = None
    palm_stderr: Optional[float] = None


def estimate_cluster_density(t: float, f: ConnectionFunction, box: BoxGeometry, replicates: int,
                             rng: RngSpec, workers: int = 1, subcritical_bound: Optional[float] = None,
                             with_palm: bool = True) -> ClusterDensityEstimate:
    """Clusters per unit volume, and t E[1/|C(0)|] from pinned samples for comparison"""
    subcritical_guard(t, f, subcritical_bound)
    seeded = rng.child(5)

    def task(r):
        sample = sample_rcm(t, f, box, np.zeros((0, box.dimension)), seeded.with_stream(r))
        return (sample.cluster_count,)

    with metrics.timer("estimate_cluster_density"):
        counts = run_replicates(replicates, task, workers)[:, 0] / box.volume
    density, stderr = batch_means(counts)
    if not replicates:
        density, stderr = 0.0, 0.0
    palm = palm_err = None
    if with_palm:
        if t == 0:
            palm, palm_err = 0.0, 0.0
        else:
            mean = estimate_mean_cluster_size(t, f, box, replicates, rng, workers, subcritical_bound)
            palm, palm_err = t * mean.inverse_mean, t * mean.inverse_stderr
    return ClusterDensityEstimate(density=density, stderr=stderr, replicates=replicates,
                                  palm_density=palm, palm_stderr=palm_err)


class _Overlaps:
    """One-dimensional overlap integrals of translates of phi"""

    def __init__(self, f: ConnectionFunction):
        if f.dimension != 1:
            raise NumericalPreconditionError(f"exact small-cluster formulas need d = 1, got d = {f.dimension}")
        self.f = f
        self.m = mass_phi(f)
        self.cutoff = f.truncation_radius

    def phi(self, x: float) -> float:
        return eval_phi(self.f, x)

    def _integrate(self, func, centres: Sequence[float]) -> float:
        lo = max(centres) - self.cutoff
        hi = min(centres) + self.cutoff
        if hi <= lo:
            return 0.0
        points = sorted({c + s * b for c in centres for s in (-1, 1) for b in self.f.breakpoints()
                         if lo < c + s * b < hi} | {c for c in centres if lo < c < hi})
        value, _ = integrate.quad(func, lo, hi, points=points or None, limit=200, epsabs=1e-13, epsrel=1e-11)
        return value

    def pair(self, z: float) -> float:
        if self.f.kind == "gilbert":
            return max(0.0, 2 * self.f.radius - abs(z))
        return self._integrate(lambda y: self.phi(y) * self.phi(y - z), [0.0, z])

    def triple(self, a: float, b: float) -> float:
        if self.f.kind == "gilbert":
            return max(0.0, 2 * self.f.radius - (max(0.0, a, b) - min(0.0, a, b)))
        return self._integrate(lambda y: self.phi(y) * self.phi(y - a) * self.phi(y - b), [0.0, a, b])

    def union(self, *centres: float) -> float:
        """Integral of 1 - prod(1 - phi(y - c)) over y, for two or three centres"""
        if len(centres) == 2:
            a, b = centres
            return 2 * self.m - self.pair(b - a)
        a, b, c = centres
        return (3 * self.m - self.pair(b - a) - self.pair(c - a) - self.pair(c - b)
                + self.triple(b - a, c - a))

    def connected3(self, a: float, b: float, c: float) -> float:
        """Probability that three points at a, b, c form a connected graph"""
        p, q, r = self.phi(b - a), self.phi(c - a), self.phi(c - b)
        return p * q + p * r + q * r - 2 * p * q * r


def _checked_quad(func, lo, hi, points, label: str) -> float:
    value, abserr = integrate.quad(func, lo, hi, points=points or None, limit=400, epsabs=1e-14, epsrel=1e-9)
    if abserr > EXACT_RTOL * max(abs(value), 1e-12):
        raise QuadratureError(f"{label}: achieved error {abserr:.3g} on value {value:.6g}",
                              {"value": value, "abserr": abserr})
    return value


def cluster_size_exact_small(t: float, f: ConnectionFunction, n: int) -> float:
    """P(|C(0)| = n+1) for n = 0, 1, 2 in one dimension by quadrature"""
    if n not in (0, 1, 2):
        raise ValueError(f"exact cluster size probabilities cover n in {{0, 1, 2}}, got {n}")
    if not t >= 0:
        raise NumericalPreconditionError(f"intensity must be non-negative, got {t}")
    geometry = _Overlaps(f)
    if n == 0:
        return math.exp(-t * geometry.m)
    if t == 0:
        return 0.0
    T = geometry.cutoff
    breaks = [s * b for b in f.breakpoints() for s in (-1, 1) if b > 0] + [0.0]

    if n == 1:
        def integrand(x1):
            return geometry.phi(x1) * math.exp(-t * geometry.union(0.0, x1))
        points = [p for p in sorted(set(breaks)) if -T < p < T]
        return t * _checked_quad(integrand, -T, T, points, "two-point cluster quadrature")

    def inner(x1):
        def integrand(x2):
            return geometry.connected3(0.0, x1, x2) * math.exp(-t * geometry.union(0.0, x1, x2))
        lo, hi = min(0.0, x1) - T, max(0.0, x1) + T
        points = sorted({p for p in breaks + [x1 + b for b in breaks] if lo < p < hi})
        value, _ = integrate.quad(integrand, lo, hi, points=points or None, limit=400,
                                  epsabs=1e-14, epsrel=1e-11)
        return value

    outer_breaks = sorted(set(breaks + [2 * b for b in breaks]))
    points = [p for p in outer_breaks if -2 * T < p < 2 * T]
    return t ** 2 / 2 * _checked_quad(inner, -2 * T, 2 * T, points, "three-point cluster quadrature")


def pair_cluster_size_exact_small(t: float, f: ConnectionFunction, x: float, n: int) -> float:
    """P(x in C(0), |C(0)| = n+2) for pins {0, x}, n = 0 or 1, in one dimension"""
    if n not in (0, 1):
        raise ValueError(f"exact pair cluster size probabilities cover n in {{0, 1}}, got {n}")
    geometry = _Overlaps(f)
    x = float(np.asarray(x, dtype=float).reshape(-1)[0])
    if n == 0:
        return geometry.phi(x) * math.exp(-t * geometry.union(0.0, x))
    if t == 0:
        return 0.0
    T = geometry.cutoff
    lo, hi = min(0.0, x) - T, max(0.0, x) + T
    breaks = [s * b for b in f.breakpoints() for s in (-1, 1) if b > 0] + [0.0]
    points = sorted({p for p in breaks + [x + b for b in breaks] if lo < p < hi})

    def integrand(x1):
        return geometry.connected3(0.0, x1, x) * math.exp(-t * geometry.union(0.0, x1, x))

    return t * _checked_quad(integrand, lo, hi, points, "pinned three-point cluster quadrature")
