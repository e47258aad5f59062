"""Low-intensity coefficients p_n(x, 0) and q_n(x, 0) and the series they build.

p_n = (1/n!) sum over connected G of kappa_n(G) J_n(G, .) = (1/n!) sum of pi_n(G) I_n(G, .)
q_n = the same kappa/J sum restricted to pivotal-free graphs

Both sums are grouped by internal-relabelling class before any integral is
evaluated, since J and I only depend on the class.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from app.errors import GraphLimitError
from app.graphs import (N_MAX, LabeledGraph, canonical_mask, connected_masks, enum_connected_graphs,
                        kappa_table, pi_values, pivotal_free)
from app.grid import GridFunction, GridGeometry, convolve, grid_from_radial
from app.integrals import I_ELIMINATION_MAX_ORDER, GraphIntegrator, Method
from app.metrics import metrics
from app.model import ConnectionFunction, RngSpec, mass_phi

logger = logging.getLogger(__name__)

EXPANSION_CELLS = 1024
EXPANSION_CELLS_PER_LENGTH = 64
BOUND_CHECK_MAX_ORDER = 3


def default_expansion_geometry(f: ConnectionFunction) -> GridGeometry:
    return GridGeometry(dimension=f.dimension, cells=EXPANSION_CELLS,
                        spacing=f.length_scale / EXPANSION_CELLS_PER_LENGTH)


def coefficient_bound(n: int, m: float) -> float:
    """Sup-norm bound 2(1+e)(2 m e)^n on p_n"""
    return 2 * (1 + math.e) * (2 * m * math.e) ** n


@dataclass(frozen=True)
class CoefficientGrid:
    order: int
    kind: str
    values: GridFunction
    method: str
    error: GridFunction
    classes: int = 0
    # pi/I representation of p_n, kept to compare against the kappa/J one
    cross_check: Optional[GridFunction] = None
    cross_check_error: Optional[GridFunction] = None

    def cross_check_gap(self) -> Optional[float]:
        """Relative sup-norm gap between the two representations"""
        if self.cross_check is None:
            return None
        scale = max(self.values.sup_norm(), self.cross_check.sup_norm(), 1e-300)
        return (self.values - self.cross_check).sup_norm() / scale

    def within_cross_check(self, rtol: float = 1e-8, sigmas: float = 3.0) -> Optional[bool]:
        if self.cross_check is None:
            return None
        gap = np.abs(self.values.values - self.cross_check.values)
        if self.method == "elimination":
            scale = max(self.values.sup_norm(), 1e-300)
            return bool(gap.max() <= rtol * scale)
        spread = np.hypot(self.error.values, self.cross_check_error.values)
        return bool(np.all(gap <= sigmas * spread + 1e-12))


def _class_weights(n: int, masks: Sequence[int], weights: Sequence[int]) -> Dict[int, int]:
    """Net coefficient per relabelling class, zero classes dropped"""
    grouped: Dict[int, int] = {}
    for mask, weight in zip(masks, weights):
        if weight:
            key = canonical_mask(LabeledGraph(n, int(mask)))
            grouped[key] = grouped.get(key, 0) + int(weight)
    return {key: grouped[key] for key in sorted(grouped) if grouped[key]}


class SeriesExpansion:
    """Coefficients of one connection function on one grid, evaluated on demand"""

    def __init__(self, f: ConnectionFunction, geometry: Optional[GridGeometry] = None,
                 method: Method = "elimination", rng: Optional[RngSpec] = None, workers: int = 1,
                 n_max: int = N_MAX, **integrator_options):
        self.f = f
        self.geometry = geometry or default_expansion_geometry(f)
        self.method = method
        self.workers = max(1, workers)
        self.n_max = n_max
        self.integrator = GraphIntegrator(f, self.geometry, method, rng=rng, **integrator_options)
        self._p: Dict[int, CoefficientGrid] = {}
        self._q: Dict[int, CoefficientGrid] = {}

    @property
    def mass(self) -> float:
        return mass_phi(self.f)

    def _check_order(self, n: int):
        if not 0 <= n <= self.n_max:
            raise GraphLimitError(f"order {n} outside 0..{self.n_max}", {"order": n, "n_max": self.n_max})

    def _weighted_sum(self, n: int, kind: str, weights: Dict[int, int]) -> Tuple[GridFunction, GridFunction]:
        graphs = [LabeledGraph(n, mask) for mask in weights]
        evaluate = self.integrator.J if kind == "J" else self.integrator.I
        if self.workers > 1 and len(graphs) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as executor:
                estimates = list(executor.map(evaluate, graphs))
        else:
            estimates = [evaluate(graph) for graph in graphs]
        total = np.zeros(self.geometry.shape)
        variance = np.zeros(self.geometry.shape)
        for graph, estimate in zip(graphs, estimates):
            weight = weights[graph.mask]
            total += weight * estimate.values.values
            variance += (weight * estimate.errors.values) ** 2
        scale = 1.0 / math.factorial(n)
        return (GridFunction(self.geometry, total * scale),
                GridFunction(self.geometry, np.sqrt(variance) * scale))

    def p(self, n: int, cross_check: bool = True) -> CoefficientGrid:
        self._check_order(n)
        if n not in self._p:
            with metrics.timer("assemble_p"):
                self._p[n] = self._assemble_p(n, cross_check)
        return self._p[n]

    def _assemble_p(self, n: int, cross_check: bool) -> CoefficientGrid:
        if n == 0:
            phi = grid_from_radial(self.f, self.geometry)
            zero = phi * 0.0
            return CoefficientGrid(order=0, kind="p", values=phi, method=self.method, error=zero,
                                   classes=1, cross_check=phi, cross_check_error=zero)
        masks = connected_masks(n)
        table = kappa_table(n)
        weights = _class_weights(n, masks, [table[int(mask)] for mask in masks])
        values, error = self._weighted_sum(n, "J", weights)

        check = check_error = None
        if cross_check and (self.method == "monte-carlo" or n <= I_ELIMINATION_MAX_ORDER):
            check, check_error = self._weighted_sum(n, "I", _class_weights(n, masks, pi_values(n)))
        result = CoefficientGrid(order=n, kind="p", values=values, method=self.method, error=error,
                                 classes=len(weights), cross_check=check, cross_check_error=check_error)
        if check is not None:
            logger.info(f"p_{n}: {len(weights)} classes, representation gap {result.cross_check_gap():.3g}")
        return result

    def q(self, n: int) -> CoefficientGrid:
        self._check_order(n)
        if n not in self._q:
            with metrics.timer("assemble_q"):
                self._q[n] = self._assemble_q(n)
        return self._q[n]

    def _assemble_q(self, n: int) -> CoefficientGrid:
        if n == 0:
            p0 = self.p(0)
            return CoefficientGrid(order=0, kind="q", values=p0.values, method=self.method,
                                   error=p0.error, classes=1)
        table = kappa_table(n)
        masks = [mask for mask in table if pivotal_free(LabeledGraph(n, mask))]
        weights = _class_weights(n, masks, [table[mask] for mask in masks])
        values, error = self._weighted_sum(n, "J", weights)
        return CoefficientGrid(order=n, kind="q", values=values, method=self.method, error=error,
                               classes=len(weights))

    def recursion_residual(self, n: int) -> Tuple[float, float]:
        """sup |q_n - p_n + sum_k q_{n-1-k} * p_k| and the scale it should be judged against"""
        residual = self.q(n).values - self.p(n).values
        scale = self.p(n).values.sup_norm()
        for k in range(n):
            term = convolve(self.q(n - 1 - k).values, self.p(k).values)
            residual = residual + term
            scale = max(scale, term.sup_norm())
        return residual.sup_norm(), scale

    def recursion_error(self, n: int) -> GridFunction:
        """Propagated standard error of the recursion residual (zero for elimination)"""
        variance = self.q(n).error.values ** 2 + self.p(n).error.values ** 2
        for k in range(n):
            # first order: error of each factor convolved with the other
            a = convolve(self.q(n - 1 - k).error, self.p(k).values.with_values(np.abs(self.p(k).values.values)))
            b = convolve(self.q(n - 1 - k).values.with_values(np.abs(self.q(n - 1 - k).values.values)),
                         self.p(k).error)
            variance = variance + a.values ** 2 + b.values ** 2
        return GridFunction(self.geometry, np.sqrt(variance))

    def recursion_check(self, n: int, rtol: float = 1e-6, sigmas: float = 3.0) -> Dict[str, float]:
        """Relative residual for elimination, sigmas times the propagated error for MC"""
        residual, scale = self.recursion_residual(n)
        relative = residual / scale if scale > 0 else residual
        if self.method == "elimination":
            holds = relative <= rtol
        else:
            holds = residual <= sigmas * self.recursion_error(n).sup_norm() + 1e-12
        return {"residual": residual, "scale": scale, "relative": relative, "holds": bool(holds)}

    def fit_geometric(self, order: int, kind: str = "p") -> Tuple[float, float]:
        """c1, c2 with sup|coefficient_n| <= c1 c2^n for n <= order, slope fitted by least squares"""
        if order == 0:
            return 2 * (1 + math.e), 2 * self.mass * math.e
        coefficient = self.p if kind == "p" else self.q
        norms = np.array([max(coefficient(n).values.sup_norm(), 1e-300) for n in range(order + 1)])
        slope, _ = np.polyfit(np.arange(order + 1), np.log(norms), 1)
        c2 = float(np.exp(slope))
        c1 = float(np.max(norms / c2 ** np.arange(order + 1)))
        return c1, c2

    def series(self, t: float, order: int, kind: str = "p") -> "SeriesResult":
        if not t >= 0:
            raise ValueError(f"intensity must be non-negative, got {t}")
        coefficient = self.p if kind == "p" else self.q
        total = np.zeros(self.geometry.shape)
        variance = np.zeros(self.geometry.shape)
        for n in range(order + 1):
            c = coefficient(n)
            total += t ** n * c.values.values
            variance += (t ** n * c.error.values) ** 2
        c1, c2 = self.fit_geometric(order, kind)
        radius = 1.0 / c2
        within = t < radius
        if within:
            tail = c1 * (c2 * t) ** (order + 1) / (1 - c2 * t)
        else:
            tail = float("inf")
            logger.warning(f"t = {t} lies outside the fitted radius {radius:.4g} of the {kind} series; "
                           "the truncated sum is reported without a tail bound")
        return SeriesResult(kind=kind, t=t, order=order, values=GridFunction(self.geometry, total),
                            error=GridFunction(self.geometry, np.sqrt(variance)), tail_bound=tail,
                            c1=c1, c2=c2, radius=radius, within_radius=within)

    def series_P(self, t: float, order: int) -> "SeriesResult":
        return self.series(t, order, "p")

    def series_Q(self, t: float, order: int) -> "SeriesResult":
        return self.series(t, order, "q")


@dataclass(frozen=True)
class SeriesResult:
    kind: str
    t: float
    order: int
    values: GridFunction
    error: GridFunction
    tail_bound: float
    c1: float
    c2: float
    radius: float
    within_radius: bool


@dataclass(frozen=True)
class CoefficientBoundCheck:
    order: int
    sup_norm: float
    bound: float

    @property
    def holds(self) -> bool:
        return self.sup_norm <= self.bound


def check_coefficient_bound(coefficient: CoefficientGrid, m: float) -> CoefficientBoundCheck:
    return CoefficientBoundCheck(order=coefficient.order, sup_norm=coefficient.values.sup_norm(),
                                 bound=coefficient_bound(coefficient.order, m))


@dataclass(frozen=True)
class IntegralBoundReport:
    order: int
    pinned_sup: float
    pinned_bound: float
    unpinned: float
    unpinned_bound: float
    method: str
    details: Dict[str, float] = field(default_factory=dict)

    @property
    def holds(self) -> bool:
        return self.pinned_sup <= self.pinned_bound and self.unpinned <= self.unpinned_bound

    def to_dict(self) -> Dict:
        return {
            "order": self.order,
            "pinned_sup": self.pinned_sup,
            "pinned_bound": self.pinned_bound,
            "unpinned": self.unpinned,
            "unpinned_bound": self.unpinned_bound,
            "method": self.method,
            "holds": self.holds,
        }


def bound_check_integral(n: int, f: ConnectionFunction, geometry: Optional[GridGeometry] = None,
                         method: Optional[Method] = None, rng: Optional[RngSpec] = None) -> IntegralBoundReport:
    """Integrated connection probability of n free points between 0 and x against its factorial bounds.

    The sum of I_n over all connected graphs is the probability that the
    points 0, x_1..x_n, x form a connected graph. Its integral over x_1..x_n
    is compared pointwise in x with n! m^n e^(n+2); its further integral
    over x with (n+1)! m^(n+1) e^(n+2).
    """
    if n > BOUND_CHECK_MAX_ORDER or n < 0:
        raise GraphLimitError(f"integral bound check supports 0 <= n <= {BOUND_CHECK_MAX_ORDER}, got {n}")
    if f.dimension != 1:
        raise GraphLimitError(f"integral bound check runs in d = 1, got d = {f.dimension}")
    geometry = geometry or default_expansion_geometry(f)
    if method is None:
        method = "elimination" if n <= I_ELIMINATION_MAX_ORDER else "monte-carlo"
    m = mass_phi(f)

    integrator = GraphIntegrator(f, geometry, method, rng=rng)
    total = np.zeros(geometry.shape)
    for graph in enum_connected_graphs(n):
        total += integrator.I(graph).values.values
    connected = GridFunction(geometry, total)
    report = IntegralBoundReport(
        order=n,
        pinned_sup=connected.sup_norm(),
        pinned_bound=math.factorial(n) * m ** n * math.e ** (n + 2),
        unpinned=connected.integral(),
        unpinned_bound=math.factorial(n + 1) * m ** (n + 1) * math.e ** (n + 2),
        method=method,
    )
    logger.info(f"integral bound n={n}: pinned {report.pinned_sup:.6g} <= {report.pinned_bound:.6g}, "
                f"unpinned {report.unpinned:.6g} <= {report.unpinned_bound:.6g}")
    return report


def assemble_p(n: int, f: ConnectionFunction, geometry: Optional[GridGeometry] = None,
               method: Method = "elimination", **options) -> CoefficientGrid:
    return SeriesExpansion(f, geometry, method, **options).p(n)


def assemble_q(n: int, f: ConnectionFunction, geometry: Optional[GridGeometry] = None,
               method: Method = "elimination", **options) -> CoefficientGrid:
    return SeriesExpansion(f, geometry, method, **options).q(n)


def series_P(t: float, order: int, f: ConnectionFunction, geometry: Optional[GridGeometry] = None,
             method: Method = "elimination", **options) -> SeriesResult:
    return SeriesExpansion(f, geometry, method, **options).series_P(t, order)


def series_Q(t: float, order: int, f: ConnectionFunction, geometry: Optional[GridGeometry] = None,
             method: Method = "elimination", **options) -> SeriesResult:
    return SeriesExpansion(f, geometry, method, **options).series_Q(t, order)
