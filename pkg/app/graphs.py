"""Two-rooted connected graphs on the vertices {0, ..., n+1}.

A graph of order n is stored as an edge bitmask over the (n+2)(n+1)/2
unordered pairs in lexicographic order (0,1), (0,2), ..., (n, n+1). Vertex 0
is the start-vertex, n+1 the end-vertex, 1..n are the internal vertices.
Whole-order tables (connectivity, pi, kappa) are computed vectorized over
all bitmasks with numpy; the per-graph functions are the reference versions.
"""
import itertools
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from app.errors import GraphLimitError
from app.metrics import metrics

logger = logging.getLogger(__name__)

N_MAX = 5
KAPPA_EDGE_LIMIT = 14


@lru_cache(maxsize=None)
def pair_list(order: int) -> Tuple[Tuple[int, int], ...]:
    """Canonical pair order: lexicographic (i, j), i < j"""
    return tuple(itertools.combinations(range(order + 2), 2))


@lru_cache(maxsize=None)
def pair_bits(order: int) -> Dict[Tuple[int, int], int]:
    return {pair: bit for bit, pair in enumerate(pair_list(order))}


def _popcount(x: int) -> int:
    return bin(x).count("1")


@dataclass(frozen=True, order=True)
class LabeledGraph:
    order: int
    mask: int

    @classmethod
    def from_edges(cls, order: int, edges: Iterable[Tuple[int, int]]) -> "LabeledGraph":
        bits = pair_bits(order)
        mask = 0
        for i, j in edges:
            if i == j:
                raise ValueError(f"self-loop at vertex {i}")
            mask |= 1 << bits[(min(i, j), max(i, j))]
        return cls(order, mask)

    @property
    def vertex_count(self) -> int:
        return self.order + 2

    @property
    def end_vertex(self) -> int:
        return self.order + 1

    @property
    def all_vertices(self) -> int:
        return (1 << self.vertex_count) - 1

    @property
    def edges(self) -> List[Tuple[int, int]]:
        return [pair for bit, pair in enumerate(pair_list(self.order)) if self.mask >> bit & 1]

    @property
    def non_edges(self) -> List[Tuple[int, int]]:
        return [pair for bit, pair in enumerate(pair_list(self.order)) if not self.mask >> bit & 1]

    @property
    def edge_count(self) -> int:
        return _popcount(self.mask)

    def has_edge(self, i: int, j: int) -> bool:
        return bool(self.mask >> pair_bits(self.order)[(min(i, j), max(i, j))] & 1)

    def adjacency(self) -> Tuple[int, ...]:
        return _adjacency(self.order, self.mask)

    def reach(self, start: int, allowed: Optional[int] = None) -> int:
        """Bitset of vertices reachable from `start` through vertices in `allowed`"""
        allowed = self.all_vertices if allowed is None else allowed
        return _reach(self.adjacency(), start, allowed | (1 << start))

    def is_connected(self) -> bool:
        return self.reach(0) == self.all_vertices

    def relabel(self, mapping: Sequence[int]) -> "LabeledGraph":
        """Graph with vertex v renamed to mapping[v]"""
        return LabeledGraph.from_edges(self.order, ((mapping[i], mapping[j]) for i, j in self.edges))

    def __str__(self) -> str:
        return " ".join([str(self.order)] + [f"{i}-{j}" for i, j in self.edges])


@lru_cache(maxsize=1 << 16)
def _adjacency(order: int, mask: int) -> Tuple[int, ...]:
    adjacency = [0] * (order + 2)
    for bit, (i, j) in enumerate(pair_list(order)):
        if mask >> bit & 1:
            adjacency[i] |= 1 << j
            adjacency[j] |= 1 << i
    return tuple(adjacency)


def _reach(adjacency: Sequence[int], start: int, allowed: int) -> int:
    seen = frontier = 1 << start
    while frontier:
        grown = 0
        vertex = 0
        while frontier:
            if frontier & 1:
                grown |= adjacency[vertex]
            frontier >>= 1
            vertex += 1
        frontier = grown & allowed & ~seen
        seen |= frontier
    return seen


def _check_order(n: int, n_max: int = N_MAX):
    if n < 0:
        raise ValueError(f"order must be non-negative, got {n}")
    if n > n_max:
        raise GraphLimitError(f"order {n} exceeds the enumeration limit n_max = {n_max}",
                              {"order": n, "n_max": n_max})


def _vector_adjacency(masks: np.ndarray, order: int) -> List[np.ndarray]:
    adjacency = [np.zeros(masks.shape, dtype=np.uint8) for _ in range(order + 2)]
    for bit, (i, j) in enumerate(pair_list(order)):
        present = ((masks >> bit) & 1).astype(np.uint8)
        adjacency[i] |= present << np.uint8(j)
        adjacency[j] |= present << np.uint8(i)
    return adjacency


def _vector_reach(adjacency: List[np.ndarray], start: int, allowed: int) -> np.ndarray:
    allowed = np.uint8(allowed | (1 << start))
    reach = np.full(adjacency[0].shape, 1 << start, dtype=np.uint8)
    for _ in range(len(adjacency) - 1):
        grown = reach.copy()
        for vertex, neighbours in enumerate(adjacency):
            grown |= np.where((reach >> np.uint8(vertex)) & np.uint8(1), neighbours, np.uint8(0))
        reach = grown & allowed
    return reach


@lru_cache(maxsize=None)
def connected_masks(n: int) -> np.ndarray:
    """Sorted bitmasks of all connected graphs of order n"""
    _check_order(n)
    masks = np.arange(1 << len(pair_list(n)), dtype=np.int64)
    full = (1 << (n + 2)) - 1
    reach = _vector_reach(_vector_adjacency(masks, n), 0, full)
    connected = masks[reach == full]
    connected.setflags(write=False)
    return connected


def enum_connected_graphs(n: int, n_max: int = N_MAX) -> Iterator[LabeledGraph]:
    """Every connected graph on {0, ..., n+1} once, in increasing bitmask order"""
    _check_order(n, n_max)
    masks = connected_masks(n)
    logger.info(f"order {n}: {len(masks)} connected graphs")
    metrics.increment("graphs_enumerated", len(masks))
    for mask in masks:
        yield LabeledGraph(n, int(mask))


def count_connected_graphs(n: int) -> int:
    return int(len(connected_masks(n)))


def pi_n(G: LabeledGraph) -> int:
    """Signed sum over I of [0 <-> n+1 using internal vertices in I only]"""
    return _pi_cached(G.order, G.mask)


@lru_cache(maxsize=1 << 16)
def _pi_cached(order: int, mask: int) -> int:
    adjacency = _adjacency(order, mask)
    end = order + 1
    endpoints = 1 | (1 << end)
    total = 0
    for subset in range(1 << order):
        if _reach(adjacency, 0, endpoints | (subset << 1)) >> end & 1:
            total += (-1) ** (order - _popcount(subset))
    return total


@lru_cache(maxsize=None)
def pi_values(n: int) -> np.ndarray:
    """pi_n of every connected graph of order n, aligned with connected_masks(n)"""
    masks = connected_masks(n)
    adjacency = _vector_adjacency(masks, n)
    end = n + 1
    total = np.zeros(masks.shape, dtype=np.int64)
    for subset in range(1 << n):
        reach = _vector_reach(adjacency, 0, 1 | (1 << end) | (subset << 1))
        hit = ((reach >> np.uint8(end)) & np.uint8(1)).astype(np.int64)
        total += (-1) ** (n - _popcount(subset)) * hit
    total.setflags(write=False)
    return total


def kappa_n(H: LabeledGraph, edge_limit: int = KAPPA_EDGE_LIMIT) -> int:
    """Moebius transform of pi over the connected spanning subgraphs of H"""
    if H.edge_count > edge_limit:
        raise GraphLimitError(
            f"kappa subset sum over {H.edge_count} edges exceeds the limit {edge_limit}; use kappa_table",
            {"edges": H.edge_count, "limit": edge_limit},
        )
    full = H.all_vertices
    total = 0
    subset = H.mask
    while True:
        if _reach(_adjacency(H.order, subset), 0, full) == full:
            sign = -1 if (H.edge_count - _popcount(subset)) & 1 else 1
            total += sign * _pi_cached(H.order, subset)
        if subset == 0:
            break
        subset = (subset - 1) & H.mask
    return total


@lru_cache(maxsize=None)
def kappa_table(n: int) -> Dict[int, int]:
    """kappa_n of every connected graph of order n by a fast Moebius transform"""
    masks = connected_masks(n)
    edges = len(pair_list(n))
    values = np.zeros(1 << edges, dtype=np.int64)
    values[masks] = pi_values(n)
    for bit in range(edges):
        view = values.reshape(-1, 2, 1 << bit)
        view[:, 1, :] -= view[:, 0, :]
    return {int(mask): int(values[mask]) for mask in masks}


def pivotal_vertices(G: LabeledGraph) -> List[int]:
    """Internal vertices lying on every path from 0 to n+1"""
    end = G.end_vertex
    return [v for v in range(1, G.order + 1)
            if not G.reach(0, G.all_vertices & ~(1 << v)) >> end & 1]


def pivotal_free(G: LabeledGraph) -> bool:
    return not pivotal_vertices(G)


def reaches_internal_before_end(G: LabeledGraph) -> bool:
    """Whether every internal vertex is reachable from 0 without passing through the end-vertex.

    Only such graphs come back as the front of last_pivotal_split; a vertex
    hanging off the end-vertex would move behind the pivot.
    """
    internal = G.all_vertices & ~1 & ~(1 << G.end_vertex)
    return G.reach(0, G.all_vertices & ~(1 << G.end_vertex)) & internal == internal


def concat(G1: LabeledGraph, G2: LabeledGraph) -> LabeledGraph:
    """Glue the end-vertex of G1 to the start-vertex of G2"""
    shift = G1.order + 1
    edges = list(G1.edges) + [(i + shift, j + shift) for i, j in G2.edges]
    return LabeledGraph.from_edges(G1.order + G2.order + 1, edges)


@lru_cache(maxsize=1 << 16)
def _canonical(order: int, mask: int) -> int:
    graph = LabeledGraph(order, mask)
    best = mask
    for perm in itertools.permutations(range(1, order + 1)):
        relabelled = graph.relabel((0,) + perm + (order + 1,)).mask
        best = min(best, relabelled)
    return best


def canonical_mask(G: LabeledGraph) -> int:
    """Smallest bitmask among relabellings of the internal vertices"""
    return _canonical(G.order, G.mask)


@dataclass(frozen=True)
class PivotalSplit:
    pivot: int
    front: LabeledGraph
    back: LabeledGraph
    relabelled: LabeledGraph
    mapping: Tuple[int, ...]


def last_pivotal_split(G: LabeledGraph) -> Optional[PivotalSplit]:
    """Factor G through its last pivotal vertex as front ⊙ back, back pivotal-free.

    Vertices in front of the pivot keep their order and become 1..k, the
    pivot becomes k+1 and the vertices behind it k+2..n. Returns None for
    pivotal-free graphs.
    """
    pivots = pivotal_vertices(G)
    if not pivots:
        return None
    everything = G.all_vertices
    fronts = {v: G.reach(0, everything & ~(1 << v)) for v in pivots}
    pivot = max(pivots, key=lambda v: _popcount(fronts[v]))
    before = [v for v in range(1, G.order + 1) if fronts[pivot] >> v & 1]
    after = [v for v in range(1, G.order + 1) if v != pivot and not fronts[pivot] >> v & 1]

    k = len(before)
    mapping = [0] * G.vertex_count
    for new, old in enumerate(before, start=1):
        mapping[old] = new
    mapping[pivot] = k + 1
    for new, old in enumerate(after, start=k + 2):
        mapping[old] = new
    mapping[G.end_vertex] = G.end_vertex
    relabelled = G.relabel(mapping)

    front = LabeledGraph.from_edges(k, [(i, j) for i, j in relabelled.edges if j <= k + 1])
    back = LabeledGraph.from_edges(G.order - 1 - k,
                                   [(i - k - 1, j - k - 1) for i, j in relabelled.edges if i >= k + 1])
    return PivotalSplit(pivot=pivot, front=front, back=back, relabelled=relabelled, mapping=tuple(mapping))


def multinomial(n: int, *parts: int) -> int:
    if sum(parts) != n:
        raise ValueError("parts must sum to n")
    return math.factorial(n) // math.prod(math.factorial(p) for p in parts)


def format_graph_list(graphs: Iterable[LabeledGraph]) -> str:
    """Edge-list text, one graph per line: order then i-j pairs"""
    return "".join(f"{graph}\n" for graph in graphs)


def parse_graph_line(line: str) -> LabeledGraph:
    fields = line.split()
    order = int(fields[0])
    edges = [tuple(int(v) for v in field.split("-")) for field in fields[1:]]
    return LabeledGraph.from_edges(order, edges)
