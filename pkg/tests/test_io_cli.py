from __future__ import annotations

import shutil
from pathlib import Path

import numpy as np
import pytest

from spfclust.cli import main
from spfclust.errors import MissingCell, NonIntegerCount, RegionMismatch, TraceCorrupt, UnknownRegion
from spfclust.io import (
    aligned_memberships,
    ingest_panel,
    read_curves,
    read_membership,
    read_trace,
    write_membership,
    write_panel,
)

SCENARIO = "sim1-poly-poisson-desk"


def write(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


@pytest.fixture
def small_files(tmp_path):
    panel = write(tmp_path / "panel.csv",
                  "region,time,y,population\n"
                  "A,1,3,100\nA,2,4,100\nB,1,0,50\nB,2,1,50\nC,1,7,80\nC,2,2,80\n")
    edges = write(tmp_path / "edges.csv", "from,to\nA,B\nB,C\n")
    return panel, edges


# -- ingest ---------------------------------------------------------------------

def test_ingest_accepts_complete_panel(small_files):
    graph, data = ingest_panel(*small_files, family="poisson")
    assert graph.n_regions == 3 and graph.n_edges == 2
    assert data.y.shape == (3, 2)
    assert data.region_ids == ("A", "B", "C")
    assert np.array_equal(data.y[2], [7, 2])
    assert np.allclose(data.offset[1], np.log(50))


def test_ingest_missing_cell(small_files, tmp_path):
    panel, edges = small_files
    lines = panel.read_text().splitlines()
    write(panel, "\n".join(lines[:-1]) + "\n")
    with pytest.raises(MissingCell):
        ingest_panel(panel, edges)


def test_ingest_unknown_region(small_files):
    panel, edges = small_files
    write(panel, panel.read_text() + "D,1,1,10\nD,2,1,10\n")
    with pytest.raises(UnknownRegion):
        ingest_panel(panel, edges)


def test_ingest_non_integer_count(small_files):
    panel, edges = small_files
    write(panel, panel.read_text().replace("A,2,4,100", "A,2,4.5,100"))
    with pytest.raises(NonIntegerCount):
        ingest_panel(panel, edges, family="poisson")
    # the gaussian family accepts real values
    ingest_panel(panel, edges, family="gaussian")


def test_panel_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    y = rng.poisson(20.0, size=(4, 3)).astype(float)
    pop = np.array([100.0, 200.0, 300.0, 400.0])
    ids = ["r1", "r2", "r3", "r4"]
    write_panel(tmp_path / "p.csv", ids, y, pop)
    write(tmp_path / "e.csv", "from,to\nr1,r2\nr2,r3\nr3,r4\n")
    _, data = ingest_panel(tmp_path / "p.csv", tmp_path / "e.csv")
    assert np.array_equal(data.y, y)
    assert np.array_equal(data.exposure[:, 0], pop)


def test_membership_round_trip_and_alignment(tmp_path):
    write_membership(tmp_path / "a.csv", ["x", "y", "z"], [2, 0, 2])
    got = read_membership(tmp_path / "a.csv")
    assert got == {"x": 2, "y": 0, "z": 2}
    est, truth = aligned_memberships(got, {"z": 1, "x": 1, "y": 5})
    assert np.array_equal(est, [2, 0, 2]) and np.array_equal(truth, [1, 5, 1])
    with pytest.raises(RegionMismatch):
        aligned_memberships(got, {"x": 0, "y": 0})


def test_trace_corruption_detected(tmp_path):
    bad = write(tmp_path / "t.csv", "# {}\niter,move,accepted,C,log_marginal,membership_rle\n"
                                    "1,birth,1,2,-3.5,0x2;1x1\n3,death,0,2,-3.5,0x2;1x1\n")
    with pytest.raises(TraceCorrupt):
        read_trace(bad)
    with pytest.raises(TraceCorrupt):
        read_trace(write(tmp_path / "u.csv", "nothing,here\n"))


# -- end to end -----------------------------------------------------------------

def simulate(dest: Path) -> Path:
    assert main(["simulate", "--scenario", SCENARIO, "--out", str(dest)]) == 0
    cfg = dest / "config.toml"
    cfg.write_text(cfg.read_text().replace("n_draws = 1000", "n_draws = 200"))
    return cfg


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    cfg = simulate(root)
    assert main(["fit", "--config", str(cfg), "--iterations", "30"]) == 0
    assert main(["summarize", "--config", str(cfg), "--trace", str(root / "out" / "trace.csv")]) == 0
    return root, cfg


def test_pipeline_outputs(pipeline):
    root, _ = pipeline
    out = root / "out"
    for name in ("trace.csv", "checkpoint.json", "diagnostics.jsonl", "estimate.csv",
                 "curves.csv", "curves.svg", "trace.svg"):
        assert (out / name).exists(), name
    echo, records = read_trace(out / "trace.csv")
    assert echo["sampler"]["iterations"] == 30
    assert [r.iter for r in records] == list(range(1, 31))
    assert (out / "curves.svg").read_text().lstrip().startswith("<?xml")


def test_curves_are_ordered(pipeline):
    root, _ = pipeline
    rows = read_curves(root / "out" / "curves.csv")
    estimate = read_membership(root / "out" / "estimate.csv")
    C = len(set(estimate.values()))
    assert len(rows) == C * 40
    for r in rows:
        assert r["q05"] <= r["mean"] <= r["q95"]
        assert r["mean"] > 0


def test_metrics_command(pipeline, capsys, tmp_path):
    root, _ = pipeline
    truth = root / "truth.csv"
    assert main(["metrics", "--estimate", str(truth), "--truth", str(truth)]) == 0
    out = capsys.readouterr().out
    assert "ari=1" in out and "nid=0" in out
    # relabelled truth scores the same
    labels = read_membership(truth)
    write_membership(tmp_path / "perm.csv", list(labels), [(v + 3) % 7 for v in labels.values()])
    assert main(["metrics", "--estimate", str(tmp_path / "perm.csv"), "--truth", str(truth)]) == 0
    assert "ari=1" in capsys.readouterr().out
    write_membership(tmp_path / "short.csv", list(labels)[:-1], list(labels.values())[:-1])
    assert main(["metrics", "--estimate", str(tmp_path / "short.csv"), "--truth", str(truth)]) == 1


def test_fit_is_byte_reproducible(pipeline, tmp_path):
    root, _ = pipeline
    other = tmp_path / "again"
    cfg = simulate(other)
    assert main(["fit", "--config", str(cfg), "--iterations", "30"]) == 0
    assert (other / "out" / "trace.csv").read_bytes() == (root / "out" / "trace.csv").read_bytes()


def test_resume_matches_uninterrupted_run(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    cfg_a, cfg_b = simulate(a), simulate(b)
    assert main(["fit", "--config", str(cfg_a), "--iterations", "24"]) == 0
    assert main(["fit", "--config", str(cfg_b), "--iterations", "12"]) == 0
    assert main(["fit", "--config", str(cfg_b), "--iterations", "24", "--resume"]) == 0
    assert (a / "out" / "trace.csv").read_bytes() == (b / "out" / "trace.csv").read_bytes()


def test_resume_rejects_changed_config(tmp_path):
    cfg = simulate(tmp_path)
    assert main(["fit", "--config", str(cfg), "--iterations", "5"]) == 0
    assert main(["fit", "--config", str(cfg), "--iterations", "10", "--seed", "9", "--resume"]) == 2


def test_zero_iterations_is_config_error(tmp_path, capsys):
    cfg = simulate(tmp_path)
    assert main(["fit", "--config", str(cfg), "--iterations", "0"]) == 2
    assert "ConfigError" in capsys.readouterr().err


def test_missing_config_and_unknown_scenario(tmp_path):
    assert main(["fit", "--config", str(tmp_path / "nope.toml")]) == 2
    assert main(["simulate", "--scenario", "sim9", "--out", str(tmp_path)]) == 2


def test_summarize_rejects_mismatched_trace(pipeline, tmp_path):
    root, cfg = pipeline
    trace = tmp_path / "trace.csv"
    shutil.copy(root / "out" / "trace.csv", trace)
    text = trace.read_text().splitlines()
    # truncate the last record's membership to a single region
    head, _, _ = text[-1].rpartition(",")
    text[-1] = head + ",0x1"
    trace.write_text("\n".join(text) + "\n")
    code = main(["summarize", "--config", str(cfg), "--trace", str(trace), "--out", str(tmp_path / "o")])
    assert code == 1


def test_scenarios_listing(capsys):
    assert main(["scenarios"]) == 0
    names = capsys.readouterr().out.split()
    assert SCENARIO in names and "sim2-s1" in names
