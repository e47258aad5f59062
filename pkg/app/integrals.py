"""Graph integrals J_n(G, x) and I_n(G, x) on the lattice of a grid.

J integrates the product of phi over the edges of G, I additionally the
product of (1 - phi) over the non-edges, over the internal vertices
x_1..x_n with x_0 = 0 and x_{n+1} = x.

Two methods:
  elimination  Riemann sums on the lattice. Every vertex v can only sit within
               dist_G(0, v) truncation radii of the origin, so each variable
               lives on a finite window of lattice points and the factors are
               dense tensors over windows. Internal vertices are summed out
               one at a time (np.einsum); intermediate factors may span at
               most MAX_SCOPE variables and ELEMENT_BUDGET entries.
  monte-carlo  Continuum estimate. Internal vertices are drawn along a BFS
               spanning tree rooted at 0 from the density phi/m_phi; the
               edge into the end-vertex and every non-tree edge are weights.
"""
import logging
from collections import deque
from dataclasses import dataclass
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np

from app.errors import EliminationBudgetError
from app.graphs import LabeledGraph, canonical_mask
from app.grid import GridFunction, GridGeometry
from app.metrics import metrics
from app.model import ConnectionFunction, RngSpec, mass_phi, sample_displacement

logger = logging.getLogger(__name__)

Method = Literal["elimination", "monte-carlo"]
Kind = Literal["J", "I"]

MAX_SCOPE = 3
ELEMENT_BUDGET = 1 << 25
I_ELIMINATION_MAX_ORDER = 2


@dataclass(frozen=True)
class IntegralEstimate:
    graph: LabeledGraph
    kind: str
    values: GridFunction
    errors: GridFunction
    method: str
    samples: int = 0
    seed: Optional[int] = None
    converged: bool = True


def graph_distances(G: LabeledGraph) -> List[int]:
    """BFS distance of every vertex from the start-vertex"""
    adjacency = G.adjacency()
    distance = [-1] * G.vertex_count
    distance[0] = 0
    queue = deque([0])
    while queue:
        v = queue.popleft()
        for w in range(G.vertex_count):
            if adjacency[v] >> w & 1 and distance[w] < 0:
                distance[w] = distance[v] + 1
                queue.append(w)
    return distance


def bfs_tree(G: LabeledGraph) -> List[int]:
    """Parent of every vertex in the BFS tree from vertex 0 (parent[0] = -1), lowest label first"""
    adjacency = G.adjacency()
    parent = [-2] * G.vertex_count
    parent[0] = -1
    queue = deque([0])
    while queue:
        v = queue.popleft()
        for w in range(G.vertex_count):
            if adjacency[v] >> w & 1 and parent[w] == -2:
                parent[w] = v
                queue.append(w)
    return parent


def lattice_window(geometry: GridGeometry, radius: float) -> np.ndarray:
    """Integer offsets k of all lattice points with |k| h <= radius, shape (M, d)"""
    reach = int(np.floor(radius / geometry.spacing * (1.0 + 1e-12) + 1e-9))
    axis = np.arange(-reach, reach + 1)
    offsets = np.stack(np.meshgrid(*([axis] * geometry.dimension), indexing="ij"), axis=-1)
    offsets = offsets.reshape(-1, geometry.dimension)
    norm = geometry.spacing * np.sqrt(np.sum(offsets.astype(float) ** 2, axis=1))
    return offsets[norm <= radius * (1.0 + 1e-12)]


class GraphIntegrator:
    """Evaluates and caches graph integrals for one connection function and grid"""

    def __init__(self, f: ConnectionFunction, geometry: GridGeometry, method: Method = "elimination",
                 rng: Optional[RngSpec] = None, samples: int = 4096, max_samples: int = 262144,
                 relative_error: float = 0.02, element_budget: int = ELEMENT_BUDGET):
        if f.dimension != geometry.dimension:
            raise ValueError(f"connection function has dimension {f.dimension}, grid has {geometry.dimension}")
        self.f = f
        self.geometry = geometry
        self.method = method
        self.rng = rng or RngSpec(seed=0)
        self.samples = samples
        self.max_samples = max(samples, max_samples)
        self.relative_error = relative_error
        self.element_budget = element_budget
        self.cutoff = f.truncation_radius
        self._windows: Dict[int, np.ndarray] = {}
        self._pair_factors: Dict[Tuple[int, int, bool], np.ndarray] = {}
        self._cache: Dict[Tuple[str, int, int], IntegralEstimate] = {}

    def J(self, G: LabeledGraph) -> IntegralEstimate:
        return self._cached("J", G)

    def I(self, G: LabeledGraph) -> IntegralEstimate:
        return self._cached("I", G)

    def _cached(self, kind: Kind, G: LabeledGraph) -> IntegralEstimate:
        # integrals do not depend on how the internal vertices are labelled
        key = (kind, G.order, canonical_mask(G))
        if key not in self._cache:
            representative = LabeledGraph(G.order, key[2])
            if self.method == "elimination":
                estimate = self._eliminate(kind, representative)
            else:
                estimate = self._monte_carlo(kind, representative)
            self._cache[key] = estimate
            metrics.increment(f"graph_integrals_{self.method}")
        cached = self._cache[key]
        if cached.graph == G:
            return cached
        return IntegralEstimate(graph=G, kind=cached.kind, values=cached.values, errors=cached.errors,
                                method=cached.method, samples=cached.samples, seed=cached.seed,
                                converged=cached.converged)

    def _check_grid(self, G: LabeledGraph):
        self.geometry.check_support((G.order + 1) * self.cutoff)

    def _window(self, hops: int) -> np.ndarray:
        if hops not in self._windows:
            self._windows[hops] = lattice_window(self.geometry, hops * self.cutoff)
        return self._windows[hops]

    def _unary(self, hops: int, complement: bool) -> np.ndarray:
        radius = self.geometry.spacing * np.sqrt(np.sum(self._window(hops).astype(float) ** 2, axis=1))
        value = self.f.radial(radius)
        return 1.0 - value if complement else value

    def _pair(self, hops_a: int, hops_b: int, complement: bool) -> np.ndarray:
        key = (hops_a, hops_b, complement)
        if key not in self._pair_factors:
            diff = self._window(hops_a)[:, None, :] - self._window(hops_b)[None, :, :]
            radius = self.geometry.spacing * np.sqrt(np.sum(diff.astype(float) ** 2, axis=-1))
            value = self.f.radial(radius)
            self._pair_factors[key] = 1.0 - value if complement else value
        return self._pair_factors[key]

    def _eliminate(self, kind: Kind, G: LabeledGraph) -> IntegralEstimate:
        n = G.order
        if kind == "I" and n > I_ELIMINATION_MAX_ORDER:
            raise EliminationBudgetError(
                f"I_{n} couples every pair of vertices; elimination is limited to n <= "
                f"{I_ELIMINATION_MAX_ORDER}, use the monte-carlo method",
                {"order": n},
            )
        self._check_grid(G)
        hops = graph_distances(G)
        end = G.end_vertex
        factors: List[Tuple[Tuple[int, ...], np.ndarray]] = []
        pairs = [(pair, False) for pair in G.edges]
        if kind == "I":
            pairs += [(pair, True) for pair in G.non_edges]
        for (i, j), complement in pairs:
            if i == 0:
                factors.append(((j,), self._unary(hops[j], complement)))
            else:
                factors.append(((i, j), self._pair(hops[i], hops[j], complement)))

        sizes = {v: len(self._window(hops[v])) for v in range(1, end + 1)}
        remaining = set(range(1, n + 1))
        while remaining:
            def cost(v):
                scope = set().union(*(s for s, _ in factors if v in s)) - {v}
                return len(scope), int(np.prod([sizes[u] for u in scope])), v
            vertex = min(remaining, key=cost)
            involved = [(s, a) for s, a in factors if vertex in s]
            factors = [(s, a) for s, a in factors if vertex not in s]
            scope = tuple(sorted(set().union(*(s for s, _ in involved)) - {vertex}))
            elements = int(np.prod([sizes[u] for u in scope]))
            if len(scope) > MAX_SCOPE or elements > self.element_budget:
                raise EliminationBudgetError(
                    f"eliminating vertex {vertex} of graph '{G}' needs a factor over {len(scope)} "
                    f"variables with {elements} entries (limits {MAX_SCOPE} variables, "
                    f"{self.element_budget} entries); use the monte-carlo method",
                    {"graph": str(G), "scope": list(scope), "elements": elements},
                )
            operands = []
            for s, array in involved:
                operands += [array, list(s)]
            reduced = np.einsum(*operands, list(scope), optimize="greedy") * self.geometry.cell_volume
            factors.append((scope, reduced))
            remaining.discard(vertex)

        window = self._window(hops[end])
        values = np.ones(len(window))
        for scope, array in factors:
            values = values * array  # scopes are () or (end,)
        grid = np.zeros(self.geometry.shape)
        np.add.at(grid, tuple((window % self.geometry.cells).T), values)
        result = GridFunction(self.geometry, grid)
        return IntegralEstimate(graph=G, kind=kind, values=result, errors=result * 0.0,
                                method="elimination")

    def _monte_carlo(self, kind: Kind, G: LabeledGraph) -> IntegralEstimate:
        self._check_grid(G)
        n = G.order
        end = G.end_vertex
        d = self.geometry.dimension
        hops = graph_distances(G)
        window = self._window(hops[end])
        x = window * self.geometry.spacing
        m = mass_phi(self.f)

        parent = bfs_tree(G)
        tree = {(min(v, parent[v]), max(v, parent[v])) for v in range(1, n + 1)}
        weight_edges = [pair for pair in G.edges if pair not in tree]
        complements = G.non_edges if kind == "I" else []

        # internal vertices hang either below 0 or below the pinned end-vertex
        order = [v for v in _bfs_order(parent) if 1 <= v <= n]
        root = {0: 0, end: end}
        for v in order:
            root[v] = root[parent[v]]

        rng = self.rng.child(G.order, G.mask, 0 if kind == "J" else 1)
        gen = rng.generator()
        total = np.zeros(len(window))
        total_sq = np.zeros(len(window))
        drawn = 0
        converged = False
        while drawn < self.max_samples:
            batch = min(self.samples, self.max_samples - drawn)
            offsets = np.zeros((batch, end + 1, d))
            for v in order:
                offsets[:, v] = offsets[:, parent[v]] + sample_displacement(self.f, batch, gen)
            # positions[s, k, v] for sample s and end-vertex position window[k]
            positions = np.repeat(offsets[:, None, :, :], len(window), axis=1)
            anchored = [v for v in range(end + 1) if root.get(v) == end]
            positions[:, :, anchored, :] += x[None, :, None, :]
            weight = np.full((batch, len(window)), m ** n)
            for i, j in weight_edges:
                weight *= self.f.radial(np.linalg.norm(positions[:, :, i] - positions[:, :, j], axis=-1))
            for i, j in complements:
                weight *= 1.0 - self.f.radial(np.linalg.norm(positions[:, :, i] - positions[:, :, j], axis=-1))
            total += weight.sum(axis=0)
            total_sq += (weight ** 2).sum(axis=0)
            drawn += batch
            mean = total / drawn
            stderr = np.sqrt(np.maximum(total_sq / drawn - mean ** 2, 0.0) / max(drawn - 1, 1))
            peak = np.abs(mean).max()
            if peak == 0 or stderr.max() <= self.relative_error * peak:
                converged = True
                break
        if not converged:
            logger.warning(f"MC estimate of {kind}_{n}('{G}') stopped at {drawn} samples with relative "
                           f"error {stderr.max() / peak:.3g} above target {self.relative_error}")

        values = np.zeros(self.geometry.shape)
        errors = np.zeros(self.geometry.shape)
        index = tuple((window % self.geometry.cells).T)
        values[index] = mean
        errors[index] = stderr
        metrics.increment("graph_integral_samples", drawn)
        return IntegralEstimate(graph=G, kind=kind, values=GridFunction(self.geometry, values),
                                errors=GridFunction(self.geometry, errors), method="monte-carlo",
                                samples=drawn, seed=rng.seed, converged=converged)


def _bfs_order(parent: List[int]) -> List[int]:
    children: Dict[int, List[int]] = {}
    for v, p in enumerate(parent):
        if p >= 0:
            children.setdefault(p, []).append(v)
    order, queue = [], deque([0])
    while queue:
        v = queue.popleft()
        order.append(v)
        queue.extend(children.get(v, []))
    return order


def eval_J(G: LabeledGraph, f: ConnectionFunction, geometry: GridGeometry,
           method: Method = "elimination", **options) -> IntegralEstimate:
    """J_n(G, x) at every grid point x"""
    return GraphIntegrator(f, geometry, method, **options).J(G)


def eval_I(G: LabeledGraph, f: ConnectionFunction, geometry: GridGeometry,
           method: Method = "elimination", **options) -> IntegralEstimate:
    """I_n(G, x) at every grid point x"""
    return GraphIntegrator(f, geometry, method, **options).I(G)
