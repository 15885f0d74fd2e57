"""Readers and writers for panel, edge, membership and trace files."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, MissingCell, NonIntegerCount, RegionMismatch, TraceCorrupt, UnknownRegion
from .graph import SpatialGraph, build_graph
from .sampler import TraceRecord


@dataclass(frozen=True, eq=False)
class PanelData:
    region_ids: tuple[str, ...]
    times: tuple[str, ...]
    y: np.ndarray
    exposure: np.ndarray | None     # population or expected count per cell
    exposure_kind: str | None       # "population", "expected" or None

    @property
    def offset(self) -> np.ndarray:
        if self.exposure is None:
            return np.zeros_like(self.y)
        return np.log(self.exposure)


def _read_rows(path: str | Path) -> tuple[list[str], list[dict]]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    if reader.fieldnames is None:
        raise DataError(f"{path}: empty file")
    fields = [f.strip() for f in reader.fieldnames]
    rows = [{k.strip(): (v.strip() if isinstance(v, str) else v) for k, v in r.items()} for r in reader]
    return fields, rows


def _time_key(t: str):
    try:
        return (0, float(t), t)
    except ValueError:
        return (1, 0.0, t)


def read_edges(path: str | Path) -> list[tuple[str, str]]:
    fields, rows = _read_rows(path)
    if not {"from", "to"} <= set(fields):
        raise DataError(f"{path}: edges file needs columns from,to")
    return [(r["from"], r["to"]) for r in rows]


def ingest_panel(panel_path: str | Path, edges_path: str | Path,
                 family: str = "poisson") -> tuple[SpatialGraph, PanelData]:
    """Read ``region,time,y[,population|expected]`` and a ``from,to`` edge list.

    Regions are ordered by first appearance in the panel file, times sorted
    (numerically when they parse as numbers).
    """
    fields, rows = _read_rows(panel_path)
    for col in ("region", "time", "y"):
        if col not in fields:
            raise DataError(f"{panel_path}: missing column {col!r}")
    exposure_kind = next((c for c in ("population", "expected") if c in fields), None)

    edge_rows = read_edges(edges_path)
    ids: dict[str, int] = {}
    for r in rows:
        if r["region"] not in ids:
            ids[r["region"]] = len(ids)
    edge_regions = {r for e in edge_rows for r in e}
    unknown = sorted(ids.keys() - edge_regions)
    if unknown:
        raise UnknownRegion(f"regions in the panel but not in the edge list: {unknown}")
    missing_regions = sorted(edge_regions - ids.keys())
    if missing_regions:
        raise MissingCell(f"regions in the edge list without observations: {missing_regions}")

    times = sorted({r["time"] for r in rows}, key=_time_key)
    t_index = {t: k for k, t in enumerate(times)}
    n, T = len(ids), len(times)
    y = np.full((n, T), np.nan)
    expo = np.full((n, T), np.nan) if exposure_kind else None
    for r in rows:
        i, t = ids[r["region"]], t_index[r["time"]]
        if not math.isnan(y[i, t]):
            raise DataError(f"duplicate cell region={r['region']} time={r['time']}")
        try:
            y[i, t] = float(r["y"])
        except (TypeError, ValueError) as exc:
            raise MissingCell(f"no value for region={r['region']} time={r['time']}") from exc
        if expo is not None:
            try:
                expo[i, t] = float(r[exposure_kind])
            except (TypeError, ValueError) as exc:
                raise MissingCell(f"no {exposure_kind} for region={r['region']} time={r['time']}") from exc
    region_ids = tuple(ids)
    holes = np.argwhere(np.isnan(y))
    if holes.size:
        i, t = holes[0]
        raise MissingCell(f"missing cell region={region_ids[i]} time={times[t]}")
    if family == "poisson":
        if expo is None:
            raise DataError("poisson family needs a population or expected column")
        if np.any(y < 0) or np.any(y != np.round(y)):
            i, t = np.argwhere((y < 0) | (y != np.round(y)))[0]
            raise NonIntegerCount(f"count at region={region_ids[i]} time={times[t]} is not a non-negative integer")
    if expo is not None and np.any(expo <= 0):
        raise DataError(f"{exposure_kind} must be positive")
    graph = build_graph(n, [(ids[a], ids[b]) for a, b in edge_rows], region_ids)
    return graph, PanelData(region_ids, tuple(times), y, expo, exposure_kind)


def write_panel(path, region_ids: Sequence[str], y: np.ndarray, population: np.ndarray | None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region", "time", "y"] + (["population"] if population is not None else []))
        for i, rid in enumerate(region_ids):
            for t in range(y.shape[1]):
                row = [rid, t + 1, _fmt(y[i, t])]
                if population is not None:
                    row.append(_fmt(population[i]))
                w.writerow(row)


def write_edges(path, graph: SpatialGraph) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["from", "to"])
        for u, v in graph.edges:
            w.writerow([graph.label(u), graph.label(v)])


def _fmt(x: float) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() else repr(x)


def write_membership(path, region_ids: Sequence[str], labels: Sequence[int], column: str = "cluster") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region", column])
        for rid, c in zip(region_ids, labels):
            w.writerow([rid, int(c)])


def read_membership(path) -> dict[str, int]:
    fields, rows = _read_rows(path)
    if "region" not in fields or len(fields) < 2:
        raise DataError(f"{path}: expected columns region,<cluster>")
    col = next(f for f in fields if f != "region")
    out: dict[str, int] = {}
    for r in rows:
        try:
            out[r["region"]] = int(r[col])
        except (TypeError, ValueError) as exc:
            raise DataError(f"{path}: bad cluster label for region {r['region']}") from exc
    return out


def aligned_memberships(estimate: dict[str, int], truth: dict[str, int]) -> tuple[np.ndarray, np.ndarray]:
    if set(estimate) != set(truth):
        only_e = sorted(set(estimate) - set(truth))
        only_t = sorted(set(truth) - set(estimate))
        raise RegionMismatch(f"region sets differ (estimate only: {only_e}, truth only: {only_t})")
    keys = sorted(truth)
    return np.array([estimate[k] for k in keys]), np.array([truth[k] for k in keys])


# ---------------------------------------------------------------------------
# traces
# ---------------------------------------------------------------------------

TRACE_COLUMNS = "iter,move,accepted,C,log_marginal,membership_rle"


def trace_header(config_echo: dict) -> str:
    return "# " + json.dumps(config_echo, sort_keys=True) + "\n" + TRACE_COLUMNS + "\n"


def read_trace(path) -> tuple[dict, list[TraceRecord]]:
    """Config echo and records of a trace file."""
    echo: dict = {}
    records: list[TraceRecord] = []
    seen_columns = False
    with open(path) as fh:
        for k, line in enumerate(fh):
            if not line.strip():
                continue
            if line.startswith("#"):
                try:
                    echo = json.loads(line[1:].strip())
                except json.JSONDecodeError as exc:
                    raise TraceCorrupt(f"{path}:{k + 1}: unreadable config echo") from exc
                continue
            if not seen_columns:
                if line.strip() != TRACE_COLUMNS:
                    raise TraceCorrupt(f"{path}:{k + 1}: expected header {TRACE_COLUMNS!r}")
                seen_columns = True
                continue
            records.append(TraceRecord.from_line(line))
    if not seen_columns:
        raise TraceCorrupt(f"{path}: no trace header")
    for a, b in zip(records, records[1:]):
        if b.iter != a.iter + 1:
            raise TraceCorrupt(f"{path}: iterations jump from {a.iter} to {b.iter}")
    return echo, records


def write_curves(path, rows: Iterable[tuple[int, str, float, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cluster", "time", "mean", "q05", "q95"])
        for c, t, m, lo, hi in rows:
            w.writerow([c, t, repr(float(m)), repr(float(lo)), repr(float(hi))])


def read_curves(path) -> list[dict]:
    fields, rows = _read_rows(path)
    if fields != ["cluster", "time", "mean", "q05", "q95"]:
        raise DataError(f"{path}: unexpected curve columns {fields}")
    return [{"cluster": int(r["cluster"]), "time": r["time"], "mean": float(r["mean"]),
             "q05": float(r["q05"]), "q95": float(r["q95"])} for r in rows]
