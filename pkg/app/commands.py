"""Subcommands. Each takes a RunConfig, writes its files and returns a summary dict."""
import logging
import time
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from app.config import RunConfig
from app.errors import EXIT_INCONCLUSIVE, EXIT_OK, EXIT_VALIDATION_FAILED, OutputError, RcmError
from app.estimators import (estimate_cluster_density, estimate_cluster_size_dist, estimate_mean_cluster_size,
                            estimate_pairconn, estimate_pairconn_by_size, estimate_pairconn_profile,
                            integrate_profile, pair_cluster_size_exact_small, profile_from_table)
from app.expansion import bound_check_integral, check_coefficient_bound
from app.graphs import enum_connected_graphs
from app.grid import GridFunction, grid_from_radial, read_binary, read_csv, write_binary, write_csv
from app.metrics import metrics
from app.model import sample_rcm
from app.oze import mean_cluster_from_P, mean_cluster_from_Q, solve_oze_fourier, solve_oze_neumann
from app.storage import (ensure_dir, is_table_csv, read_table, write_graph_list, write_json, write_sample,
                         write_table, write_text)
from app.validation import build_expansion, run_validation

logger = logging.getLogger(__name__)


def _wall_time(config: RunConfig, start: float) -> Optional[float]:
    return time.perf_counter() - start if config.output.record_wall_time else None


def _write_grid(g: GridFunction, config: RunConfig, directory: Path, stem: str) -> List[Path]:
    files = []
    if config.output.wants("binary"):
        path = directory / f"{stem}.bin"
        write_binary(g, path)
        files.append(path)
    if config.output.wants("csv"):
        path = directory / f"{stem}.csv"
        write_csv(g, path)
        files.append(path)
    return files


def cmd_pairconn(config: RunConfig) -> Dict[str, Any]:
    """Radial pair connectedness profile, its integral, and the probe table"""
    start = time.perf_counter()
    f, box, rng, t = config.connection(), config.box_geometry(), config.rng(), config.run.t
    directory = ensure_dir(config.output.directory)
    workers = config.run.threads

    profile, table = estimate_pairconn_profile(t, f, box, config.bin_width, config.profile_radius,
                                               config.run.profile_replicates, rng.child(10), workers)
    integral, error = integrate_profile(profile, box.dimension)
    table.metadata.update({
        "integral": integral,
        "integral_stderr": error,
        "mean_cluster_size_from_P": 1.0 + t * integral,
        "mean_cluster_size_stderr": t * error,
    })
    files = list(write_table(table, directory, "pairconn", _wall_time(config, start)).values())

    probes = config.run.probe_points(box.dimension)
    if probes:
        probe_table = estimate_pairconn(t, f, box, probes, config.run.replicates, rng.child(11), workers)
        files += list(write_table(probe_table, directory, "pairconn_probes", _wall_time(config, start)).values())

    logger.info(f"pair connectedness: integral {integral:.6g} +- {error:.2g}, "
                f"1 + t*integral = {1.0 + t * integral:.6g}")
    return {"command": "pairconn", "files": [str(p) for p in files], "integral": integral,
            "integral_stderr": error}


def cmd_cluster_dist(config: RunConfig) -> Dict[str, Any]:
    """Cluster-size pmf of the origin, mean cluster size and cluster density"""
    start = time.perf_counter()
    f, box, rng, t = config.connection(), config.box_geometry(), config.rng(), config.run.t
    directory = ensure_dir(config.output.directory)
    workers, replicates = config.run.threads, config.run.replicates

    table = estimate_cluster_size_dist(t, f, box, config.run.max_size, replicates, rng.child(20), workers)
    mean = estimate_mean_cluster_size(t, f, box, replicates, rng.child(21), workers,
                                      config.run.subcritical_bound, config.run.boundary_threshold)
    density = estimate_cluster_density(t, f, box, replicates, rng.child(22), workers,
                                       config.run.subcritical_bound, with_palm=False)
    table.metadata.update({
        "mean": mean.to_dict(),
        "cluster_density": density.density,
        "cluster_density_stderr": density.stderr,
        "palm_cluster_density": t * mean.inverse_mean,
        "palm_cluster_density_stderr": t * mean.inverse_stderr,
    })
    files = list(write_table(table, directory, "cluster_dist", _wall_time(config, start)).values())

    probes = config.run.probe_points(box.dimension)
    if probes:
        by_size = estimate_pairconn_by_size(t, f, box, probes[0], config.run.max_size, replicates,
                                            rng.child(23), workers)
        if box.dimension == 1:
            # sizes 2 and 3 have closed forms on the line
            by_size.metadata["exact"] = {str(n + 2): pair_cluster_size_exact_small(t, f, probes[0], n)
                                         for n in (0, 1)}
        files += list(write_table(by_size, directory, "pairconn_by_size", _wall_time(config, start)).values())

    return {"command": "cluster-dist", "files": [str(p) for p in files],
            "mean_cluster_size": mean.value, "boundary_flag": mean.boundary_flag}


def load_pair_connectedness(path, config: RunConfig) -> GridFunction:
    """P from a binary grid, a grid CSV, or a pair connectedness table CSV"""
    path = Path(path)
    if not path.exists():
        raise OutputError(f"input file {path} does not exist")
    if path.suffix == ".bin":
        return read_binary(path)
    geometry = config.oze_geometry()
    if is_table_csv(path):
        table = read_table(path)
        return grid_from_radial(profile_from_table(table, config.model.dimension), geometry)
    return read_csv(path, geometry)


def cmd_oze(config: RunConfig, p_path) -> Dict[str, Any]:
    """Solve P = Q + t Q*P for Q and report the Q-based identities"""
    start = time.perf_counter()
    directory = ensure_dir(config.output.directory)
    P = load_pair_connectedness(p_path, config)
    t = 0.0 if config.run.zero_intensity else config.run.t

    if config.run.oze_solver == "neumann":
        solution = solve_oze_neumann(P, t, config.run.neumann_max_terms, config.run.neumann_tol)
    else:
        solution = solve_oze_fourier(P, t, config.run.spectral_floor)
    Q = solution.q
    mean = mean_cluster_from_Q(Q, t)

    files = _write_grid(Q, config, directory, "q")
    summary = {
        "input": str(p_path),
        "t": t,
        "solver": solution.method,
        "residual": solution.residual,
        "min_denominator": solution.min_denominator,
        "min_frequency": list(solution.min_frequency),
        "neumann_terms": solution.terms,
        "integral_p": P.integral(),
        "integral_q": Q.integral(),
        "mean_cluster_size": mean,
        "mean_cluster_size_from_P": mean_cluster_from_P(P, t),
        "q_even": Q.is_even(),
        "p_boundary_mass": P.boundary_mass(),
        "q_boundary_mass": Q.boundary_mass(),
    }
    if config.output.record_wall_time:
        summary["wall_time_seconds"] = _wall_time(config, start)
    files.append(write_json(summary, directory / "oze.json"))
    logger.info(f"OZE solve t={t}: residual {solution.residual:.3g}, mean cluster size {mean:.6g}")
    return {"command": "oze", "files": [str(p) for p in files], **summary}


def cmd_expand(config: RunConfig) -> Dict[str, Any]:
    """Coefficient grids p_n, q_n up to the configured order with their cross-checks"""
    directory = ensure_dir(config.output.directory)
    expansion = build_expansion(config)
    order = config.run.expansion_order
    m = expansion.mass
    files: List[Path] = []
    orders = []
    lines = []

    for n in range(order + 1):
        graphs = list(enum_connected_graphs(n))
        files.append(write_graph_list(graphs, directory / f"graphs_{n}.txt"))
        p, q = expansion.p(n), expansion.q(n)
        files += _write_grid(p.values, config, directory, f"p_{n}")
        files += _write_grid(q.values, config, directory, f"q_{n}")
        bound = check_coefficient_bound(p, m)
        entry = {
            "order": n,
            "graphs": len(graphs),
            "classes_p": p.classes,
            "classes_q": q.classes,
            "representation_gap": p.cross_check_gap(),
            "representation_agrees": p.within_cross_check(config.run.identity_tol, config.run.sigmas),
            "recursion": (expansion.recursion_check(n, config.run.residual_tol, config.run.sigmas)
                          if n > 0 else None),
            "p_sup": bound.sup_norm,
            "p_bound": bound.bound,
            "p_bound_holds": bound.holds,
        }
        if n <= 2 and expansion.geometry.dimension == 1:
            entry["integral_bound"] = bound_check_integral(n, expansion.f, expansion.geometry,
                                                           rng=config.rng().child(31, n)).to_dict()
        orders.append(entry)
        recursion = entry["recursion"]
        lines.append(f"order {n}: graphs={len(graphs)}"
                     + (f" recursion_residual={recursion['relative']:.3e}" if recursion else ""))

    t = config.run.t
    series_p = expansion.series_P(t, order)
    series_q = expansion.series_Q(t, order)
    files += _write_grid(series_p.values, config, directory, "series_p")
    files += _write_grid(series_q.values, config, directory, "series_q")
    routes = {}
    try:
        solved = solve_oze_fourier(series_p.values, t, config.run.spectral_floor).q
        routes = {"q_route_gap": (solved - series_q.values).sup_norm(),
                  "q_route_allowance": series_p.tail_bound + series_q.tail_bound}
    except RcmError as e:
        routes = {"q_route_error": e.detail}

    summary = {
        "connection": expansion.f.model_dump(mode="json", exclude_none=True),
        "geometry": expansion.geometry.model_dump(),
        "method": expansion.method,
        "orders": orders,
        "series": {"t": t, "tail_bound_p": series_p.tail_bound, "tail_bound_q": series_q.tail_bound,
                   "c1": series_p.c1, "c2": series_p.c2, "radius": series_p.radius,
                   "within_radius": series_p.within_radius, **routes},
    }
    files.append(write_json(summary, directory / "expand.json"))
    files.append(write_text("\n".join(lines) + "\n", directory / "expand_summary.txt"))
    for line in lines:
        logger.info(line)
    return {"command": "expand", "files": [str(p) for p in files], "lines": lines}


def cmd_sample(config: RunConfig) -> Dict[str, Any]:
    """One sample with a pin at the origin, as points and edges CSVs"""
    box = config.box_geometry()
    sample = sample_rcm(config.run.t, config.connection(), box, np.zeros((1, box.dimension)),
                        config.rng().child(40))
    files = write_sample(sample, ensure_dir(config.output.directory))
    return {"command": "sample", "files": [str(p) for p in files.values()], "points": sample.size,
            "edges": int(len(sample.edges)), "clusters": sample.cluster_count}


def cmd_validate(config: RunConfig) -> Dict[str, Any]:
    """Run every acceptance criterion and write the JSON report and a text summary"""
    directory = ensure_dir(config.output.directory)
    report = run_validation(config)
    files = [write_json(report.to_dict(), directory / "validation.json"),
             write_text(report.summary(), directory / "validation.txt")]
    status = report.status
    exit_code = {"pass": EXIT_OK, "fail": EXIT_VALIDATION_FAILED}.get(status, EXIT_INCONCLUSIVE)
    metrics.increment(f"validation_{status}")
    return {"command": "validate", "files": [str(p) for p in files], "status": status, "exit_code": exit_code}


COMMANDS = {
    "pairconn": cmd_pairconn,
    "cluster-dist": cmd_cluster_dist,
    "expand": cmd_expand,
    "validate": cmd_validate,
    "sample": cmd_sample,
}
