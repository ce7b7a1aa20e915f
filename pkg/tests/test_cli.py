import json

import numpy as np
import pytest

from maxtomo.cli import load_config, main
from maxtomo.scattering import read_smatrix_csv

CONFIG = """\
[mesh]
h = 0.012   # coarse test chamber
[material]
source = phantom
stroke_center = 0.02, 0, 0.04
stroke_axes = 0.02, 0.015, 0.015
[synth]
noise_level = 0
[inverse]
alpha = 0
max_iter = 20
"""


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text(CONFIG)
    return p


def run(cfg, tmp_path, *args):
    return main([args[0], "--config", str(cfg), *args[1:]])


def test_forward_writes_complete_deterministic_csv(cfg, tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["forward", "--config", str(cfg), f"--output.dir={a}",
                 "--material.source=uniform"]) == 0
    assert main(["forward", "--config", str(cfg), f"--output.dir={b}",
                 "--material.source=uniform"]) == 0
    ta, tb = (a / "s_matrix.csv").read_bytes(), (b / "s_matrix.csv").read_bytes()
    assert ta == tb
    S = read_smatrix_csv(a / "s_matrix.csv")
    assert S.mask.all() and S.n_ports == 8
    events = [json.loads(ln) for ln in (a / "log.jsonl").read_text().splitlines()]
    solves = [e for e in events if e["event"] == "solve"]
    assert len(solves) == 8
    assert all(e["residual"] <= 1e-8 and e["converged"] for e in solves)


def test_synth_then_invert(cfg, tmp_path):
    out = tmp_path / "o"
    assert main(["synth", "--config", str(cfg), "--seed", "42", f"--output.dir={out}"]) == 0
    for name in ("s_measured.csv", "s_empty.csv", "truth.vtk", "truth_eps.csv"):
        assert (out / name).exists()
    inv = tmp_path / "inv"
    code = main(["invert", "--config", str(cfg), f"--output.dir={inv}",
                 "--measured", str(out / "s_measured.csv"), "--empty", str(out / "s_empty.csv")])
    assert code == 0
    hist = (inv / "history.csv").read_text().splitlines()
    assert hist[0] == "iter,cost,grad_norm,step"
    costs = [float(ln.split(",")[1]) for ln in hist[1:]]
    assert costs[-1] <= 1e-2 * costs[0]
    assert (inv / "reconstruction.vtk").exists()


def test_noiseless_uniform_synth_equals_empty(cfg, tmp_path):
    out = tmp_path / "u"
    assert main(["synth", "--config", str(cfg), f"--output.dir={out}",
                 "--material.source=uniform"]) == 0
    assert (out / "s_measured.csv").read_bytes() == (out / "s_empty.csv").read_bytes()


def test_synth_is_reproducible_with_seed(cfg, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["synth", "--config", str(cfg), "--seed", "42", f"--output.dir={d}",
                     "--synth.noise_level=0.1", "--material.source=uniform"]) == 0
    assert (a / "s_measured.csv").read_bytes() == (b / "s_measured.csv").read_bytes()


def test_invert_from_truth_stops_immediately(cfg, tmp_path):
    out = tmp_path / "t"
    assert main(["synth", "--config", str(cfg), f"--output.dir={out}",
                 "--material.source=uniform"]) == 0
    inv = tmp_path / "ti"
    assert main(["invert", "--config", str(cfg), f"--output.dir={inv}",
                 "--measured", str(out / "s_measured.csv"),
                 "--empty", str(out / "s_empty.csv")]) == 0
    hist = (inv / "history.csv").read_text().splitlines()
    assert len(hist) - 1 <= 2


def test_missing_empty_is_config_error(cfg, tmp_path, capsys):
    out = tmp_path / "m"
    main(["synth", "--config", str(cfg), f"--output.dir={out}", "--material.source=uniform"])
    capsys.readouterr()
    code = main(["invert", "--config", str(cfg), f"--output.dir={out}",
                 "--measured", str(out / "s_measured.csv")])
    assert code == 2
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert json.loads(err)["code"] == 2


@pytest.mark.parametrize("args", [["forward", "--solver.tol=2"],
                                  ["forward", "--nosuch.key=1"],
                                  ["forward", "--solver.bogus=1"],
                                  ["forward", "--threads", "0"],
                                  ["forward", "--config", "/nonexistent.ini"],
                                  ["frobnicate"]])
def test_configuration_errors_exit_2(tmp_path, args):
    assert main(args + [f"--output.dir={tmp_path}"]) == 2


def test_threads_from_environment(monkeypatch, tmp_path):
    from maxtomo.cli import RunConfig

    monkeypatch.setenv("MAXTOMO_THREADS", "3")
    cfg = RunConfig(load_config(None, [f"output.dir={tmp_path}"]))
    assert cfg.threads == 3
    assert RunConfig(load_config(None), threads=2).threads == 2


def test_meshgen_and_reload(cfg, tmp_path):
    out = tmp_path / "mesh"
    assert main(["meshgen", "--config", str(cfg), f"--output.dir={out}"]) == 0
    assert main(["forward", "--config", str(cfg), f"--output.dir={out}",
                 f"--mesh.file={out / 'mesh.msh'}", "--material.source=uniform"]) == 0


def test_bench_report(cfg, tmp_path):
    out = tmp_path / "bench"
    assert main(["bench", "--config", str(cfg), f"--output.dir={out}",
                 "--bench.subdomains=1,2", "--bench.threads=1", "--material.source=uniform"]) == 0
    rows = (out / "bench.csv").read_text().splitlines()
    header = rows[0].split(",")
    assert "setup_time" in header and "iterations_max" in header
    its = [int(r.split(",")[header.index("iterations_max")]) for r in rows[1:]]
    assert its[0] >= 1 and its[1] >= its[0]
