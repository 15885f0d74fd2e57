"""Command-line interface: ``simulate``, ``fit``, ``summarize`` and ``metrics``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import Settings, load_settings, template_config
from .errors import ConfigError, EmptyTrace, SpfclustError, TraceCorrupt
from .graph import SpatialGraph
from .io import (
    PanelData,
    aligned_memberships,
    ingest_panel,
    read_membership,
    read_trace,
    trace_header,
    write_curves,
    write_edges,
    write_membership,
    write_panel,
)
from .posterior import compare_partitions, dahl_point_estimate, relabel_by_size
from .sampler import Panel, composition_sample, load_checkpoint, run_chain, save_checkpoint
from .simdata import builtin_scenarios, generate, log_rate_transform

log = logging.getLogger("spfclust")

THREADS_ENV = "SPFCLUST_THREADS"


def _thread_limit():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(value))


# ---------------------------------------------------------------------------
# data loading
# ---------------------------------------------------------------------------

def load_panel(settings: Settings) -> tuple[SpatialGraph, Panel, PanelData]:
    """Graph, model-ready panel and raw panel data for a configuration."""
    graph, raw = ingest_panel(settings.panel, settings.edges,
                              "poisson" if settings.family == "poisson" else "gaussian")
    if settings.transform == "log_rate":
        if raw.exposure is None:
            raise ConfigError("transform 'log_rate' needs a population or expected column")
        y = log_rate_transform(raw.y, raw.exposure)
        panel = Panel(y, np.zeros_like(y), raw.exposure)
    else:
        panel = Panel(raw.y, raw.offset, raw.exposure)
    return graph, panel, raw


def _observed_curves(settings: Settings, panel: Panel, raw) -> np.ndarray:
    """Observed relative risk for count models, the modelled response otherwise."""
    if settings.family == "poisson":
        return raw.y / raw.exposure
    return panel.y - panel.offset


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(scenario: str, out: Path, seed: int | None = None) -> dict:
    scenarios = builtin_scenarios()
    if scenario not in scenarios:
        raise ConfigError(f"unknown scenario {scenario!r}; choose from {sorted(scenarios)}")
    spec = scenarios[scenario]
    if seed is not None:
        spec = spec.with_seed(seed)
    sim = generate(spec)
    out.mkdir(parents=True, exist_ok=True)
    ids = [f"R{i + 1:03d}" for i in range(spec.n_regions)]
    graph = SpatialGraph(sim.graph.n_regions, sim.graph.edges, tuple(ids))
    write_panel(out / "panel.csv", ids, sim.panel.y, sim.panel.population)
    write_edges(out / "edges.csv", graph)
    write_membership(out / "truth.csv", ids, sim.labels, column="true_cluster")
    with open(out / "centroids.csv", "w") as fh:
        fh.write("region,x,y\n")
        for rid, (x, y) in zip(ids, sim.centroids):
            fh.write(f"{rid},{x!r},{y!r}\n")
    echo = spec.to_dict()
    echo["n_edges"] = graph.n_edges
    (out / "scenario.json").write_text(json.dumps(echo, indent=2) + "\n")
    (out / "config.toml").write_text(template_config(spec.family, spec.latent_kind, seed=spec.seed))
    return echo


def cmd_fit(settings: Settings, resume: bool = False) -> dict:
    graph, panel, _ = load_panel(settings)
    spec = settings.model_spec(panel.T)
    cfg = settings.run_config()
    out = settings.out_dir
    out.mkdir(parents=True, exist_ok=True)
    trace_path = out / "trace.csv"
    ckpt_path = out / "checkpoint.json"
    diag_path = out / "diagnostics.jsonl"
    echo = settings.echo()

    state = None
    if resume:
        if not ckpt_path.exists() or not trace_path.exists():
            raise ConfigError(f"nothing to resume in {out}")
        old_echo, records = read_trace(trace_path)
        if _without_iterations(old_echo) != _without_iterations(echo):
            raise ConfigError("configuration differs from the one that produced the trace")
        state = load_checkpoint(ckpt_path, graph)
        records = [r for r in records if r.iter <= state.iter]
        if len(records) != state.iter:
            raise TraceCorrupt(f"trace has {len(records)} records but the checkpoint is at {state.iter}")
        with open(trace_path, "w") as fh:
            fh.write(trace_header(echo))
            for r in records:
                fh.write(r.to_line() + "\n")
    else:
        with open(trace_path, "w") as fh:
            fh.write(trace_header(echo))

    diag_fh = open(diag_path, "a" if resume else "w") if settings.diagnostics else None

    def diagnostics(event: dict) -> None:
        if diag_fh is not None:
            diag_fh.write(json.dumps(event, sort_keys=True) + "\n")

    def checkpoint(st, rec) -> None:
        if settings.checkpoint_every and st.iter % settings.checkpoint_every == 0:
            trace_fh.flush()
            save_checkpoint(st, ckpt_path)

    try:
        with open(trace_path, "a") as trace_fh, _thread_limit():
            output = run_chain(graph, panel, spec, cfg, state=state, trace_file=trace_fh,
                               diagnostics=diagnostics, callback=checkpoint)
            trace_fh.flush()
            save_checkpoint(output.state, ckpt_path)
    finally:
        if diag_fh is not None:
            diag_fh.close()
    st = output.state
    summary = {
        "iterations": st.iter,
        "final_clusters": st.partition.n_clusters,
        "acceptance": {k: (None if v != v else round(v, 4)) for k, v in output.acceptance_rates.items()},
        "cache_entries": len(st.cache),
        "trace": str(trace_path),
        "checkpoint": str(ckpt_path),
    }
    return summary


def _without_iterations(echo: dict) -> dict:
    e = json.loads(json.dumps(echo))
    e.get("sampler", {}).pop("iterations", None)
    return e


def cmd_summarize(settings: Settings, trace_path: Path) -> dict:
    graph, panel, raw = load_panel(settings)
    spec = settings.model_spec(panel.T)
    _, records = read_trace(trace_path)
    if not records:
        raise EmptyTrace(f"{trace_path} has no records")
    for r in records:
        if len(r.membership) != graph.n_regions:
            raise TraceCorrupt(f"iteration {r.iter}: membership has {len(r.membership)} regions, "
                               f"expected {graph.n_regions}")
    start = int(settings.burn_in_fraction * len(records))
    kept = [np.array(r.membership) for r in records[start:]]
    estimate = relabel_by_size(dahl_point_estimate(kept))
    out = settings.out_dir
    out.mkdir(parents=True, exist_ok=True)
    write_membership(out / "estimate.csv", raw.region_ids, estimate)

    rng = np.random.default_rng(settings.seed)
    with _thread_limit():
        summaries = composition_sample(estimate, panel, spec, settings.n_draws, rng,
                                       settings.run_config().laplace)
    rr = settings.family == "poisson"
    rows = []
    for c in sorted(summaries):
        s = summaries[c]
        mean, lo, hi = (s.rr_mean, s.rr_q05, s.rr_q95) if rr else (s.h_mean, s.h_q05, s.h_q95)
        for k, t in enumerate(raw.times):
            rows.append((c, t, mean[k], lo[k], hi[k]))
    write_curves(out / "curves.csv", rows)

    result = {"estimate": str(out / "estimate.csv"), "curves": str(out / "curves.csv"),
              "n_clusters": int(estimate.max()) + 1, "records_used": len(kept)}
    if settings.plots:
        from .plotting import plot_cluster_curves, plot_trace
        observed = _observed_curves(settings, panel, raw)
        plot_cluster_curves(out / "curves.svg", summaries,
                            {c: observed[estimate == c] for c in summaries}, relative_risk=rr)
        plot_trace(out / "trace.svg", np.array([r.iter for r in records]),
                   np.array([r.log_marginal for r in records]),
                   np.array([r.n_clusters for r in records]), burn_in=records[start].iter)
        result["figures"] = [str(out / "curves.svg"), str(out / "trace.svg")]
    if settings.truth is not None and settings.truth.exists():
        result["metrics"] = cmd_metrics(out / "estimate.csv", settings.truth)
    return result


def cmd_metrics(estimate_csv: Path, truth_csv: Path) -> dict[str, float]:
    est, truth = aligned_memberships(read_membership(estimate_csv), read_membership(truth_csv))
    return compare_partitions(est, truth)


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spfclust", description="Spatial functional clustering of areal time series.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write a built-in synthetic scenario")
    s.add_argument("--scenario", required=True, help="scenario name (see the scenarios command)")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--seed", type=int)

    sub.add_parser("scenarios", help="list built-in scenarios")

    f = sub.add_parser("fit", help="run the partition sampler")
    f.add_argument("--config", required=True, type=Path)
    f.add_argument("--resume", action="store_true", help="continue from the checkpoint in the output dir")
    f.add_argument("--iterations", type=int)
    f.add_argument("--seed", type=int)
    f.add_argument("--c0", type=int)
    f.add_argument("--out", type=Path, dest="out_dir")

    m = sub.add_parser("summarize", help="point estimate, fitted curves and figures from a trace")
    m.add_argument("--config", required=True, type=Path)
    m.add_argument("--trace", required=True, type=Path)
    m.add_argument("--out", type=Path, dest="out_dir")

    k = sub.add_parser("metrics", help="compare an estimated partition with the truth")
    k.add_argument("--estimate", required=True, type=Path)
    k.add_argument("--truth", required=True, type=Path)
    return p


def _print_kv(d: dict) -> None:
    for key, value in d.items():
        if isinstance(value, float):
            print(f"{key}={value:.6g}")
        elif isinstance(value, dict):
            print(f"{key}={json.dumps(value, sort_keys=True)}")
        else:
            print(f"{key}={value}")


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "simulate":
            _print_kv(cmd_simulate(args.scenario, args.out, args.seed))
        elif args.command == "scenarios":
            for name in builtin_scenarios():
                print(name)
        elif args.command == "fit":
            overrides = {"iterations": args.iterations, "seed": args.seed, "c0": args.c0,
                         "out_dir": args.out_dir}
            settings = load_settings(args.config, overrides)
            _print_kv(cmd_fit(settings, resume=args.resume))
        elif args.command == "summarize":
            settings = load_settings(args.config, {"out_dir": args.out_dir})
            if not args.trace.exists():
                raise TraceCorrupt(f"trace file not found: {args.trace}")
            _print_kv(cmd_summarize(settings, args.trace))
        elif args.command == "metrics":
            _print_kv(cmd_metrics(args.estimate, args.truth))
    except ConfigError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except SpfclustError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
