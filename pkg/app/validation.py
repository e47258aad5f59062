"""Acceptance suite: a registry of numbered checks with three-state findings.

Statistical checks that miss their tolerance on a replicate budget below the
nominal one are reported inconclusive instead of failed.
"""
import itertools
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Callable, Dict, List, Optional

import networkx as nx

from app.config import RunConfig
from app.errors import RcmError
from app.estimators import (EstimateTable, cluster_size_exact_small, estimate_cluster_density,
                            estimate_cluster_size_dist, estimate_mean_cluster_size, estimate_pairconn,
                            estimate_pairconn_profile, integrate_profile)
from app.expansion import SeriesExpansion, bound_check_integral, check_coefficient_bound
from app.graphs import (LabeledGraph, concat, connected_masks, count_connected_graphs, enum_connected_graphs,
                        kappa_table, last_pivotal_split, multinomial, pi_n, pivotal_free,
                        reaches_internal_before_end)
from app.grid import convolve, grid_from_radial
from app.integrals import GraphIntegrator
from app.model import mass_phi
from app.oze import mean_cluster_from_Q, solve_oze_fourier, solve_oze_neumann
from app.storage import dumps, table_csv_text

logger = logging.getLogger(__name__)

NOMINAL_REPLICATES = 100000
PASS, FAIL, INCONCLUSIVE = "pass", "fail", "inconclusive"
COMBINATORIAL_MAX_ORDER = 3
IDENTITY_MAX_ORDER = 2


def build_expansion(config: RunConfig) -> SeriesExpansion:
    return SeriesExpansion(
        config.connection(), config.expansion_geometry(), config.run.expansion_method,
        rng=config.rng().child(30), workers=config.run.threads, samples=config.run.mc_samples,
        max_samples=config.run.mc_max_samples, relative_error=config.run.mc_relative_error,
    )


@dataclass
class Finding:
    criterion: int
    name: str
    status: str
    measured: Any = None
    target: Any = None
    tolerance: Any = None
    detail: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return {
            "criterion": self.criterion,
            "name": self.name,
            "status": self.status,
            "measured": self.measured,
            "target": self.target,
            "tolerance": self.tolerance,
            "detail": self.detail,
        }


@dataclass
class ValidationReport:
    findings: List[Finding]
    config: Dict[str, Any] = field(default_factory=dict)

    @property
    def status(self) -> str:
        states = {finding.status for finding in self.findings}
        if FAIL in states:
            return FAIL
        if INCONCLUSIVE in states:
            return INCONCLUSIVE
        return PASS

    def to_dict(self) -> Dict[str, Any]:
        return {
            "status": self.status,
            "criteria": [finding.to_dict() for finding in self.findings],
            "config": self.config,
        }

    def summary(self) -> str:
        lines = []
        for finding in self.findings:
            line = (f"[{finding.status.upper()}] {finding.criterion:>2} {finding.name}: "
                    f"measured={finding.measured} target={finding.target} tolerance={finding.tolerance}")
            if finding.detail:
                line += f" ({finding.detail})"
            lines.append(line)
        lines.append(f"overall: {self.status}")
        return "\n".join(lines) + "\n"


def _close(a: float, b: float, tolerance: float) -> bool:
    return abs(a - b) <= tolerance


class ValidationContext:
    """Estimates shared between checks, computed on first use"""

    def __init__(self, config: RunConfig):
        self.config = config
        self.f = config.connection()
        self.box = config.box_geometry()
        self.rng = config.rng().child(50)
        self.t = config.run.t
        self.replicates = config.run.replicates
        self.workers = config.run.threads
        self.sigmas = config.run.sigmas

    @property
    def m(self) -> float:
        return mass_phi(self.f)

    def statistical(self, ok: bool) -> str:
        if ok:
            return PASS
        return INCONCLUSIVE if self.replicates < NOMINAL_REPLICATES else FAIL

    @cached_property
    def cluster_table(self) -> EstimateTable:
        return estimate_cluster_size_dist(self.t, self.f, self.box, self.config.run.max_size,
                                          self.replicates, self.rng.child(1), self.workers)

    @cached_property
    def mean(self):
        return estimate_mean_cluster_size(self.t, self.f, self.box, self.replicates, self.rng.child(5),
                                          self.workers, self.config.run.subcritical_bound,
                                          self.config.run.boundary_threshold)

    @cached_property
    def profile(self):
        return estimate_pairconn_profile(self.t, self.f, self.box, self.config.bin_width,
                                         self.config.profile_radius, self.config.run.profile_replicates,
                                         self.rng.child(5, 1), self.workers)[0]

    @cached_property
    def expansion(self) -> SeriesExpansion:
        return build_expansion(self.config)

    @cached_property
    def exact_integrator(self) -> GraphIntegrator:
        return GraphIntegrator(self.f, self.config.expansion_geometry(), "elimination")

    @cached_property
    def series_p(self):
        return self.expansion.series_P(self.t, self.config.run.expansion_order)


def check_isolated_vertex(ctx: ValidationContext) -> Finding:
    row = ctx.cluster_table.row("1")
    target = math.exp(-ctx.t * ctx.m)
    tolerance = ctx.sigmas * row.stderr
    return Finding(1, "isolated_vertex", ctx.statistical(_close(row.estimate, target, tolerance)),
                   row.estimate, target, tolerance)


def check_two_point_cluster(ctx: ValidationContext) -> Finding:
    if ctx.f.dimension != 1:
        return Finding(2, "two_point_cluster", INCONCLUSIVE, detail="exact formula evaluated in d = 1 only")
    row = ctx.cluster_table.row("2")
    target = cluster_size_exact_small(ctx.t, ctx.f, 1)
    tolerance = ctx.sigmas * row.stderr
    return Finding(2, "two_point_cluster", ctx.statistical(_close(row.estimate, target, tolerance)),
                   row.estimate, target, tolerance)


def check_oze_residual(ctx: ValidationContext) -> Finding:
    P = ctx.series_p.values
    solution = solve_oze_fourier(P, ctx.t, ctx.config.run.spectral_floor)
    tolerance = 1e-10 * max(1.0, P.sup_norm())
    ok = solution.residual <= tolerance and solution.min_denominator > 0
    return Finding(3, "oze_residual", PASS if ok else FAIL, solution.residual, 0.0, tolerance,
                   f"min(1 + t P^) = {solution.min_denominator:.6g}")


def check_solver_equivalence(ctx: ValidationContext) -> Finding:
    P = ctx.series_p.values
    t = min(ctx.t, 0.5 / P.l1_norm()) if P.l1_norm() > 0 else ctx.t
    fourier = solve_oze_fourier(P, t, ctx.config.run.spectral_floor).q
    neumann = solve_oze_neumann(P, t, ctx.config.run.neumann_max_terms, ctx.config.run.neumann_tol).q
    gap = (fourier - neumann).sup_norm()
    return Finding(4, "solver_equivalence", PASS if gap <= 1e-8 else FAIL, gap, 0.0, 1e-8,
                   f"compared at t = {t:.6g} where t*||P||_1 <= 0.5")


def check_mean_cluster_triangle(ctx: ValidationContext) -> Finding:
    t = ctx.t
    mc, mc_err = ctx.mean.value, ctx.mean.stderr
    integral, integral_err = integrate_profile(ctx.profile, ctx.f.dimension)
    from_p, from_p_err = 1.0 + t * integral, t * integral_err

    P = grid_from_radial(ctx.profile, ctx.config.oze_geometry())
    Q = solve_oze_fourier(P, t, ctx.config.run.spectral_floor).q
    from_q = mean_cluster_from_Q(Q, t)
    # the grid and the shell sum discretize the same profile differently
    allowance = t * abs(P.integral() - integral)

    pairs = {
        "mc_vs_p": (abs(mc - from_p), ctx.sigmas * math.hypot(mc_err, from_p_err)),
        "mc_vs_q": (abs(mc - from_q), ctx.sigmas * math.hypot(mc_err, from_p_err) + allowance),
        "p_vs_q": (abs(from_p - from_q), ctx.sigmas * from_p_err + allowance),
    }
    ok = all(gap <= tolerance for gap, tolerance in pairs.values())
    integral_q = Q.integral()
    exact = 0 <= integral_q < (1.0 / t if t > 0 else math.inf)
    status = ctx.statistical(ok) if exact else FAIL
    return Finding(5, "mean_cluster_triangle", status,
                   {"mc": mc, "from_p": from_p, "from_q": from_q, "integral_q": integral_q},
                   "pairwise agreement, 0 <= integral Q < 1/t",
                   {name: tolerance for name, (_, tolerance) in pairs.items()},
                   "" if exact else "integral of Q outside [0, 1/t)")


def check_cluster_density(ctx: ValidationContext) -> Finding:
    density = estimate_cluster_density(ctx.t, ctx.f, ctx.box, ctx.replicates, ctx.rng.child(6), ctx.workers,
                                       ctx.config.run.subcritical_bound, with_palm=False)
    palm, palm_err = ctx.t * ctx.mean.inverse_mean, ctx.t * ctx.mean.inverse_stderr
    tolerance = ctx.sigmas * math.hypot(density.stderr, palm_err)
    return Finding(6, "cluster_density", ctx.statistical(_close(density.density, palm, tolerance)),
                   density.density, palm, tolerance)


def _nx_graph(G: LabeledGraph) -> nx.Graph:
    graph = nx.Graph()
    graph.add_nodes_from(range(G.vertex_count))
    graph.add_edges_from(G.edges)
    return graph


def pi_brute(G: LabeledGraph) -> int:
    """Signed subset sum with networkx path queries"""
    graph = _nx_graph(G)
    end = G.end_vertex
    total = 0
    for size in range(G.order + 1):
        for subset in itertools.combinations(range(1, G.order + 1), size):
            sub = graph.subgraph({0, end, *subset})
            total += (-1) ** (G.order - size) * int(nx.has_path(sub, 0, end))
    return total


def kappa_brute(H: LabeledGraph, pi_of: Callable[[int], int]) -> int:
    """Signed sum over spanning connected subgraphs, connectivity by networkx"""
    total = 0
    subset = H.mask
    while True:
        G = LabeledGraph(H.order, subset)
        if nx.is_connected(_nx_graph(G)):
            total += (-1) ** (H.edge_count - G.edge_count) * pi_of(subset)
        if subset == 0:
            break
        subset = (subset - 1) & H.mask
    return total


def combinatorial_mismatches(max_order: int = COMBINATORIAL_MAX_ORDER) -> Dict[str, int]:
    mismatches = {"counts": 0, "pi": 0, "kappa": 0, "pi_product": 0, "kappa_product": 0, "pivotal_split": 0}
    for n, expected in ((0, 1), (1, 4), (2, 38)):
        mismatches["counts"] += int(count_connected_graphs(n) != expected)

    graphs = {n: list(enum_connected_graphs(n)) for n in range(max_order + 1)}
    for n in range(max_order + 1):
        brute = {G.mask: pi_brute(G) for G in graphs[n]}
        table = kappa_table(n)
        for G in graphs[n]:
            mismatches["pi"] += int(pi_n(G) != brute[G.mask])
            mismatches["kappa"] += int(table[G.mask] != kappa_brute(G, brute.__getitem__))

    for n in range(max_order + 1):
        for m in range(max_order + 1 - n):
            joined_table = kappa_table(n + m + 1)
            for G1 in graphs[n]:
                for G2 in graphs[m]:
                    joined = concat(G1, G2)
                    mismatches["pi_product"] += int(pi_n(joined) != pi_n(G1) * pi_n(G2))
                    mismatches["kappa_product"] += int(
                        joined_table[joined.mask] != kappa_table(n)[G1.mask] * kappa_table(m)[G2.mask])

    for n in range(1, max_order + 1):
        groups: Dict[tuple, int] = {}
        for G in graphs[n]:
            split = last_pivotal_split(G)
            if split is None:
                continue
            if (not pivotal_free(split.back) or not reaches_internal_before_end(split.front)
                    or concat(split.front, split.back) != split.relabelled):
                mismatches["pivotal_split"] += 1
            key = (split.front.order, split.front.mask, split.back.mask)
            groups[key] = groups.get(key, 0) + 1
        for k in range(n):
            backs = [B for B in graphs[n - 1 - k] if pivotal_free(B)]
            for F in filter(reaches_internal_before_end, graphs[k]):
                for B in backs:
                    if groups.get((k, F.mask, B.mask), 0) != multinomial(n, k, n - 1 - k, 1):
                        mismatches["pivotal_split"] += 1
    return mismatches


def check_combinatorics(ctx: ValidationContext) -> Finding:
    mismatches = combinatorial_mismatches()
    ok = not any(mismatches.values())
    return Finding(7, "combinatorial_oracles", PASS if ok else FAIL, mismatches, 0, 0,
                   f"graph counts 1/4/38 and exhaustive checks up to order {COMBINATORIAL_MAX_ORDER}")


def identity_gaps(integrator: GraphIntegrator, max_order: int = IDENTITY_MAX_ORDER) -> Dict[str, float]:
    """Relative sup gaps of J = sum of I over supersets, and J(G1) * J(G2) = J(G1 concat G2)"""
    moebius = 0.0
    for n in range(max_order + 1):
        masks = [int(mask) for mask in connected_masks(n)]
        for mask in masks:
            J = integrator.J(LabeledGraph(n, mask)).values
            total = sum((integrator.I(LabeledGraph(n, h)).values for h in masks if h & mask == mask),
                        J * 0.0)
            moebius = max(moebius, (J - total).sup_norm() / max(J.sup_norm(), 1e-300))

    convolution = 0.0
    for n in range(max_order + 1):
        for m in range(max_order + 1 - n):
            for G1 in enum_connected_graphs(n):
                for G2 in enum_connected_graphs(m):
                    glued = integrator.J(concat(G1, G2)).values
                    product = convolve(integrator.J(G1).values, integrator.J(G2).values)
                    convolution = max(convolution, (glued - product).sup_norm() / max(glued.sup_norm(), 1e-300))
    return {"moebius": moebius, "convolution": convolution}


def check_identities(ctx: ValidationContext) -> Finding:
    gaps = identity_gaps(ctx.exact_integrator)
    tolerance = ctx.config.run.identity_tol
    ok = all(gap <= tolerance for gap in gaps.values())
    return Finding(8, "moebius_and_convolution", PASS if ok else FAIL, gaps, 0.0, tolerance)


def check_recursion(ctx: ValidationContext) -> Finding:
    order = ctx.config.run.expansion_order
    checks = {n: ctx.expansion.recursion_check(n, ctx.config.run.residual_tol, ctx.sigmas)
              for n in range(1, order + 1)}
    ok = all(check["holds"] for check in checks.values())
    measured = {str(n): check["relative"] for n, check in checks.items()}
    return Finding(9, "q_recursion", PASS if ok else FAIL, measured, 0.0,
                   ctx.config.run.residual_tol if ctx.expansion.method == "elimination" else f"{ctx.sigmas} sigma")


def check_series_vs_mc(ctx: ValidationContext) -> Finding:
    t = ctx.config.run.series_t
    order = ctx.config.run.expansion_order
    series = ctx.expansion.series_P(t, order)
    probes = ctx.config.run.probe_points(ctx.f.dimension)
    table = estimate_pairconn(t, ctx.f, ctx.box, probes, ctx.replicates, ctx.rng.child(10), ctx.workers)
    measured, tolerances, ok = {}, {}, True
    for x, row in zip(probes, table.rows):
        value = series.values.value_at(x)
        spread = math.hypot(row.stderr, series.error.value_at(x))
        tolerance = max(ctx.sigmas * spread, series.tail_bound)
        measured[row.input] = {"series": value, "mc": row.estimate}
        tolerances[row.input] = tolerance
        ok = ok and _close(value, row.estimate, tolerance)
    return Finding(10, "series_vs_simulation", ctx.statistical(ok), measured, "series = MC", tolerances,
                   f"t = {t}, order {order}")


def check_bounds(ctx: ValidationContext) -> Finding:
    order = min(ctx.config.run.expansion_order, 3)
    coefficient = {str(n): check_coefficient_bound(ctx.expansion.p(n), ctx.m) for n in range(order + 1)}
    integral = {}
    if ctx.f.dimension == 1:
        for n in range(min(order, 2) + 1):
            integral[str(n)] = bound_check_integral(n, ctx.f, ctx.config.expansion_geometry())
    ok = all(check.holds for check in coefficient.values()) and all(r.holds for r in integral.values())
    measured = {
        "coefficient_sup": {n: c.sup_norm for n, c in coefficient.items()},
        "integral_pinned": {n: r.pinned_sup for n, r in integral.items()},
        "integral_unpinned": {n: r.unpinned for n, r in integral.items()},
    }
    target = {
        "coefficient_bound": {n: c.bound for n, c in coefficient.items()},
        "integral_pinned_bound": {n: r.pinned_bound for n, r in integral.items()},
        "integral_unpinned_bound": {n: r.unpinned_bound for n, r in integral.items()},
    }
    return Finding(11, "coefficient_and_integral_bounds", PASS if ok else FAIL, measured, target, 0.0)


def check_determinism(ctx: ValidationContext) -> Finding:
    replicates = min(ctx.replicates, 1000)
    probes = ctx.config.run.probe_points(ctx.f.dimension)

    def render() -> str:
        table = estimate_pairconn(ctx.t, ctx.f, ctx.box, probes, replicates, ctx.rng.child(12), ctx.workers)
        pmf = estimate_cluster_size_dist(ctx.t, ctx.f, ctx.box, ctx.config.run.max_size, replicates,
                                         ctx.rng.child(13), ctx.workers)
        return table_csv_text(table) + table_csv_text(pmf) + dumps(table.metadata)

    identical = render() == render()
    return Finding(12, "determinism", PASS if identical else FAIL, identical, True, None,
                   f"two runs of {replicates} replicates with the same seed")


CRITERIA: Dict[int, Dict[str, Any]] = {
    1: {"name": "isolated_vertex", "check": check_isolated_vertex},
    2: {"name": "two_point_cluster", "check": check_two_point_cluster},
    3: {"name": "oze_residual", "check": check_oze_residual},
    4: {"name": "solver_equivalence", "check": check_solver_equivalence},
    5: {"name": "mean_cluster_triangle", "check": check_mean_cluster_triangle},
    6: {"name": "cluster_density", "check": check_cluster_density},
    7: {"name": "combinatorial_oracles", "check": check_combinatorics},
    8: {"name": "moebius_and_convolution", "check": check_identities},
    9: {"name": "q_recursion", "check": check_recursion},
    10: {"name": "series_vs_simulation", "check": check_series_vs_mc},
    11: {"name": "coefficient_and_integral_bounds", "check": check_bounds},
    12: {"name": "determinism", "check": check_determinism},
}


def run_validation(config: RunConfig, criteria: Optional[List[int]] = None) -> ValidationReport:
    """Run the selected criteria (all by default) in order"""
    ctx = ValidationContext(config)
    findings = []
    for number in criteria or sorted(CRITERIA):
        entry = CRITERIA[number]
        try:
            finding = entry["check"](ctx)
        except RcmError as e:
            finding = Finding(number, entry["name"], FAIL, detail=f"{type(e).__name__}: {e.detail}")
        logger.info(f"criterion {number} {entry['name']}: {finding.status}")
        findings.append(finding)
    return ValidationReport(findings=findings, config=config.model_dump(mode="json"))
