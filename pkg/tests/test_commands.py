import json
import math

import numpy as np
import pytest

from app.commands import cmd_cluster_dist, cmd_expand, cmd_oze, cmd_pairconn, cmd_sample, load_pair_connectedness
from app.config import build_config
from app.errors import EXIT_CONFIG, EXIT_OUTPUT, OutputError
from app.grid import read_binary, write_binary, zeros
from app.storage import read_table
from main import main


def small_config(directory, **run):
    settings = {
        "t": 0.0,
        "replicates": 40,
        "profile_replicates": 20,
        "bin_width": 0.25,
        "profile_radius": 2.0,
        "grid_cells": 512,
        "expansion_cells": 512,
        "expansion_spacing": 1.0 / 32,
        "expansion_order": 1,
        "max_size": 3,
    }
    settings.update(run)
    return build_config({"box": {"side_length": 10.0}, "run": settings, "output": {"directory": str(directory)}})


def test_pairconn_at_zero_intensity_is_phi(tmp_path):
    result = cmd_pairconn(small_config(tmp_path))
    assert result["integral"] == pytest.approx(2.0)
    lines = (tmp_path / "pairconn.csv").read_text().splitlines()
    assert lines[0] == "input,estimate,stderr,n"
    assert lines[1] == "0.125,1,0,20"
    assert lines[-1] == "1.875,0,0,20"
    meta = json.loads((tmp_path / "pairconn.meta.json").read_text())
    assert meta["mean_cluster_size_from_P"] == 1.0
    assert meta["bin_width"] == 0.25
    assert "wall_time_seconds" not in meta
    probes = (tmp_path / "pairconn_probes.csv").read_text().splitlines()
    assert probes[1:] == ["0.5,1,0,40", "1.5,0,0,40", "2.5,0,0,40"]


def test_pairconn_reruns_are_byte_identical(tmp_path):
    for name in ("a", "b"):
        cmd_pairconn(small_config(tmp_path / name, t=0.3, threads=2))
    for stem in ("pairconn.csv", "pairconn.meta.json", "pairconn_probes.csv"):
        assert (tmp_path / "a" / stem).read_bytes() == (tmp_path / "b" / stem).read_bytes()


def test_seed_changes_the_estimates(tmp_path):
    cmd_pairconn(small_config(tmp_path / "a", t=0.3))
    cmd_pairconn(small_config(tmp_path / "b", t=0.3, seed=1))
    assert (tmp_path / "a" / "pairconn.csv").read_text() != (tmp_path / "b" / "pairconn.csv").read_text()


def test_cluster_dist(tmp_path):
    result = cmd_cluster_dist(small_config(tmp_path))
    assert result["mean_cluster_size"] == 1.0
    lines = (tmp_path / "cluster_dist.csv").read_text().splitlines()
    assert lines[1:] == ["1,1,0,40", "2,0,0,40", "3,0,0,40", "overflow,0,0,40"]
    meta = json.loads((tmp_path / "cluster_dist.meta.json").read_text())
    assert meta["mean"]["mean_cluster_size"] == 1.0
    assert meta["cluster_density"] == 0.0

    # x = 0.5 is always joined to the origin pin at t = 0
    by_size = (tmp_path / "pairconn_by_size.csv").read_text().splitlines()
    assert by_size[1:] == ["2,1,0,40", "3,0,0,40", "overflow,0,0,40"]
    exact = json.loads((tmp_path / "pairconn_by_size.meta.json").read_text())["exact"]
    assert exact == {"2": 1.0, "3": 0.0}
    assert str(tmp_path / "pairconn_by_size.csv") in result["files"]


def test_cluster_dist_pair_sizes_match_closed_forms(tmp_path):
    cmd_cluster_dist(small_config(tmp_path, t=0.2, replicates=4000, probes="0.5"))
    table = read_table(tmp_path / "pairconn_by_size.csv")
    exact = table.metadata["exact"]
    assert exact["2"] == pytest.approx(math.exp(-0.2 * 2.5))
    for size in ("2", "3"):
        row = table.row(size)
        assert row.estimate == pytest.approx(exact[size], abs=4 * row.stderr + 1e-3)


def test_oze_on_pairconn_output_at_zero_intensity(tmp_path):
    config = small_config(tmp_path)
    cmd_pairconn(config)
    result = cmd_oze(config.model_copy(update={"run": config.run.model_copy(update={"zero_intensity": True})}),
                     tmp_path / "pairconn.csv")
    assert result["t"] == 0.0
    assert result["mean_cluster_size"] == 1.0
    assert result["residual"] == 0.0
    P = load_pair_connectedness(tmp_path / "pairconn.csv", config)
    Q = read_binary(tmp_path / "q.bin")
    assert np.array_equal(Q.values, P.values)
    summary = json.loads((tmp_path / "oze.json").read_text())
    assert summary["integral_q"] == pytest.approx(summary["integral_p"])


def test_oze_of_zero_input(tmp_path):
    config = small_config(tmp_path, t=0.2)
    path = tmp_path / "zero.bin"
    write_binary(zeros(config.oze_geometry()), path)
    result = cmd_oze(config, path)
    assert result["mean_cluster_size"] == 1.0
    assert read_binary(tmp_path / "q.bin").sup_norm() == 0.0


def test_oze_solves_a_simulated_profile(tmp_path):
    config = small_config(tmp_path, t=0.2, profile_replicates=200)
    cmd_pairconn(config)
    result = cmd_oze(config, tmp_path / "pairconn.csv")
    assert result["residual"] < 1e-10
    assert 1.0 < result["mean_cluster_size"] < 2.0
    assert result["mean_cluster_size"] == pytest.approx(result["mean_cluster_size_from_P"], rel=1e-10)


def test_missing_input(tmp_path):
    with pytest.raises(OutputError):
        cmd_oze(small_config(tmp_path), tmp_path / "missing.bin")


def test_expand_writes_coefficients(tmp_path):
    result = cmd_expand(small_config(tmp_path, t=0.02, expansion_order=2))
    assert result["lines"][0] == "order 0: graphs=1"
    assert result["lines"][1].startswith("order 1: graphs=4 recursion_residual=")
    assert result["lines"][2].startswith("order 2: graphs=38 recursion_residual=")
    assert len((tmp_path / "graphs_2.txt").read_text().splitlines()) == 38
    assert (tmp_path / "graphs_0.txt").read_text() == "0 0-1\n"
    for stem in ("p_0", "p_1", "p_2", "q_2", "series_p", "series_q"):
        assert (tmp_path / f"{stem}.bin").exists()
        assert (tmp_path / f"{stem}.csv").exists()

    summary = json.loads((tmp_path / "expand.json").read_text())
    orders = summary["orders"]
    assert [entry["graphs"] for entry in orders] == [1, 4, 38]
    assert all(entry["p_bound_holds"] for entry in orders)
    assert orders[1]["recursion"]["holds"]
    assert orders[2]["recursion"]["holds"]
    assert orders[2]["representation_agrees"]
    assert orders[1]["integral_bound"]["holds"]
    assert summary["series"]["within_radius"]
    assert summary["series"]["q_route_gap"] < 1e-3


def test_expand_order_zero(tmp_path):
    result = cmd_expand(small_config(tmp_path, expansion_order=0))
    assert result["lines"] == ["order 0: graphs=1"]
    p0 = read_binary(tmp_path / "p_0.bin")
    assert p0.value_at(1.0) == 1.0
    assert p0.value_at(1.5) == 0.0


def test_sample_command(tmp_path):
    result = cmd_sample(small_config(tmp_path, t=0.5))
    points = (tmp_path / "sample_points.csv").read_text().splitlines()
    assert points[0] == "index,pinned,x0"
    assert points[1] == "0,1,0"
    assert len(points) == result["points"] + 1
    edges = (tmp_path / "sample_edges.csv").read_text().splitlines()
    assert edges[0] == "i,j"
    assert len(edges) == result["edges"] + 1


def test_main_runs_a_subcommand(tmp_path):
    config = tmp_path / "run.ini"
    config.write_text("[box]\nside_length = 10\n[run]\nt = 0.3\n")
    out = tmp_path / "out"
    assert main(["--config", str(config), "--out", str(out), "--seed", "3", "sample"]) == 0
    assert (out / "sample_points.csv").exists()
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["counters"]["rcm_samples"] == 1


def test_main_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[run]\nunknown_key = 1\n")
    assert main(["--config", str(bad), "sample"]) == EXIT_CONFIG
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error["error"] == "ConfigError"

    good = tmp_path / "good.ini"
    good.write_text(f"[box]\nside_length = 10\n[output]\ndirectory = {tmp_path / 'out'}\n")
    assert main(["--config", str(good), "oze", str(tmp_path / "missing.bin")]) == EXIT_OUTPUT
