"""Output files: estimate tables, JSON sidecars, samples, graph lists and metrics."""
import csv
import io
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Union

import numpy as np

from app.errors import OutputError
from app.estimators import EstimateRow, EstimateTable
from app.graphs import LabeledGraph, format_graph_list
from app.metrics import metrics
from app.model import RcmSample

logger = logging.getLogger(__name__)

TABLE_HEADER = ["input", "estimate", "stderr", "n"]

PathLike = Union[str, Path]


def ensure_dir(directory: PathLike) -> Path:
    try:
        os.makedirs(directory, exist_ok=True)
    except OSError as e:
        raise OutputError(f"cannot create output directory {directory}: {e}")
    return Path(directory)


def _jsonable(value: Any):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


def dumps(data: Dict[str, Any]) -> str:
    return json.dumps(data, sort_keys=True, indent=2, default=_jsonable) + "\n"


def write_json(data: Dict[str, Any], path: PathLike) -> Path:
    try:
        Path(path).write_text(dumps(data), encoding="utf-8")
    except OSError as e:
        raise OutputError(f"cannot write {path}: {e}")
    return Path(path)


def read_json(path: PathLike) -> Dict[str, Any]:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise OutputError(f"cannot read {path}: {e}")


def table_csv_text(table: EstimateTable) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(TABLE_HEADER)
    for row in table.rows:
        writer.writerow([row.input, f"{row.estimate:.17g}", f"{row.stderr:.17g}", row.n])
    return buffer.getvalue()


def write_table_csv(table: EstimateTable, path: PathLike) -> Path:
    try:
        with open(path, "w", newline="", encoding="utf-8") as handle:
            handle.write(table_csv_text(table))
    except OSError as e:
        raise OutputError(f"cannot write table to {path}: {e}")
    return Path(path)


def meta_path(csv_path: PathLike) -> Path:
    path = Path(csv_path)
    return path.with_name(path.stem + ".meta.json")


def write_table(table: EstimateTable, directory: PathLike, stem: str,
                wall_time: Optional[float] = None) -> Dict[str, Path]:
    """CSV plus metadata sidecar; wall time only when given"""
    directory = ensure_dir(directory)
    csv_file = write_table_csv(table, directory / f"{stem}.csv")
    meta = {"kind": table.kind, **table.metadata}
    if wall_time is not None:
        meta["wall_time_seconds"] = wall_time
    meta_file = write_json(meta, meta_path(csv_file))
    return {"csv": csv_file, "meta": meta_file}


def is_table_csv(path: PathLike) -> bool:
    try:
        with open(path, newline="", encoding="utf-8") as handle:
            header = next(csv.reader(handle), [])
    except OSError as e:
        raise OutputError(f"cannot read {path}: {e}")
    return header == TABLE_HEADER


def read_table(path: PathLike) -> EstimateTable:
    """Table CSV with its sidecar when one exists next to it"""
    try:
        with open(path, newline="", encoding="utf-8") as handle:
            rows = [EstimateRow(input=r["input"], estimate=float(r["estimate"]), stderr=float(r["stderr"]),
                                n=int(r["n"])) for r in csv.DictReader(handle)]
    except (OSError, KeyError, ValueError) as e:
        raise OutputError(f"cannot read estimate table {path}: {e}")
    sidecar = meta_path(path)
    metadata = read_json(sidecar) if sidecar.exists() else {}
    kind = metadata.pop("kind", "pairconn")
    return EstimateTable(kind=kind, rows=rows, metadata=metadata)


def write_sample(sample: RcmSample, directory: PathLike, stem: str = "sample") -> Dict[str, Path]:
    """points CSV (index, pinned, x0, x1, ...) and edges CSV (i, j)"""
    directory = ensure_dir(directory)
    points_file = directory / f"{stem}_points.csv"
    edges_file = directory / f"{stem}_edges.csv"
    d = sample.points.shape[1]
    try:
        with open(points_file, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["index", "pinned"] + [f"x{k}" for k in range(d)])
            for index, point in enumerate(sample.points):
                writer.writerow([index, int(index < sample.pinned_count)] + [f"{c:.17g}" for c in point])
        with open(edges_file, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["i", "j"])
            for i, j in sample.edges:
                writer.writerow([int(i), int(j)])
    except OSError as e:
        raise OutputError(f"cannot write sample to {directory}: {e}")
    return {"points": points_file, "edges": edges_file}


def write_graph_list(graphs: Iterable[LabeledGraph], path: PathLike) -> Path:
    try:
        Path(path).write_text(format_graph_list(graphs), encoding="utf-8")
    except OSError as e:
        raise OutputError(f"cannot write graph list to {path}: {e}")
    return Path(path)


def write_text(text: str, path: PathLike) -> Path:
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as e:
        raise OutputError(f"cannot write {path}: {e}")
    return Path(path)


def write_metrics(directory: PathLike) -> Path:
    """Counters and timers of this run; wall-clock data lives only here"""
    return write_json(metrics.get_metrics(), ensure_dir(directory) / "metrics.json")
