import json
import math

import numpy as np
import pytest
import yaml

from mvlab.cli import main
from mvlab.io import write_columnar
from mvlab.transport import CostSpec, EmpiricalMeasure, exact_wasserstein_eta


def _config(tmp_path, **over):
    cfg = {"experiment": "strong-error", "seed": 3, "output_dir": str(tmp_path / "out"),
           "model": {"name": "linear-attraction", "params": {"eps": 0.3}},
           "sim": {"dt": 0.02, "T": 0.2},
           "params": {"N_grid": [4, 8], "reps": 6, "flow_M": 300, "picard_tol": 0.2}}
    cfg.update(over)
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def _cloud(path, pts):
    pts = np.asarray(pts, dtype=np.float64)
    write_columnar(path, [0.0], pts[None] if pts.ndim == 2 else pts[None, :, None])


def test_run_writes_outputs(tmp_path, capsys):
    code = main(["run", str(_config(tmp_path))])
    out = capsys.readouterr().out
    assert code in (0, 2)
    assert "strong-error:slope_in_band" in out
    files = json.loads((tmp_path / "out" / "manifest.json").read_text())["files"]
    assert files == ["fit_strong_error.csv", "report.json"]
    rows = (tmp_path / "out" / "fit_strong_error.csv").read_text().splitlines()
    assert len(rows) == 3


def test_unknown_experiment_lists_names(tmp_path, capsys):
    assert main(["run", str(_config(tmp_path, experiment="nope"))]) == 1
    err = capsys.readouterr().err
    assert "poc-rate" in err and "strong-error" in err


def test_unknown_key_and_missing_file(tmp_path, capsys):
    assert main(["run", str(_config(tmp_path, bogus=1))]) == 1
    assert "bogus" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.yaml")]) == 1
    assert main(["frobnicate"]) == 1


def test_unknown_model(tmp_path, capsys):
    path = _config(tmp_path, model={"name": "nope"})
    assert main(["run", str(path)]) == 1
    assert "linear-attraction" in capsys.readouterr().err


def test_failing_criterion_exits_two(tmp_path):
    params = {"N_grid": [4, 8], "reps": 6, "flow_M": 300, "picard_tol": 0.2, "slope_band": [5.0, 6.0]}
    assert main(["run", str(_config(tmp_path, params=params))]) == 2


def test_worker_count_does_not_change_report(tmp_path, monkeypatch):
    outs = []
    for w in ("1", "8"):
        monkeypatch.setenv("MVLAB_WORKERS", w)
        path = _config(tmp_path, output_dir=str(tmp_path / f"w{w}"),
                       params={"N_grid": [2, 4], "reps": 40, "flow_M": 300, "picard_tol": 0.2})
        main(["run", str(path)])
        outs.append((tmp_path / f"w{w}" / "report.json").read_bytes())
    assert outs[0] == outs[1]


def test_dist_examples(tmp_path, capsys):
    _cloud(tmp_path / "a.csv", [0.0])
    _cloud(tmp_path / "b.csv", [4.0])
    assert main(["dist", str(tmp_path / "a.csv"), str(tmp_path / "b.csv"), "--eta", "0.5"]) == 0
    assert float(capsys.readouterr().out.split()[1]) == pytest.approx(2.0)
    assert main(["dist", str(tmp_path / "a.csv"), str(tmp_path / "a.csv")]) == 0
    assert float(capsys.readouterr().out.split()[1]) == 0.0


def test_dist_methods_bracket_exact(tmp_path, capsys):
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(30, 2)), rng.normal(size=(30, 2)) + 0.3
    _cloud(tmp_path / "a.csv", a)
    _cloud(tmp_path / "b.csv", b)
    exact = exact_wasserstein_eta(EmpiricalMeasure(a, m=2), EmpiricalMeasure(b, m=2), CostSpec(0.5, 2)).value
    args = [str(tmp_path / "a.csv"), str(tmp_path / "b.csv"), "--eta", "0.5", "--m", "2"]
    assert main(["dist", *args, "--method", "sinkhorn"]) == 0
    assert float(capsys.readouterr().out.split()[1]) >= exact - 1e-8
    assert main(["dist", *args, "--method", "dual"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert float(lines[0].split()[1]) <= exact + 1e-9
    assert float(lines[1].split()[1]) >= -1e-9


def test_dist_malformed_file(tmp_path, capsys):
    (tmp_path / "bad.csv").write_text("t,idx,x0\n0.0,0,1.0\n0.0,1,oops\n")
    _cloud(tmp_path / "a.csv", [0.0])
    assert main(["dist", str(tmp_path / "bad.csv"), str(tmp_path / "a.csv")]) == 1
    assert "bad.csv:3" in capsys.readouterr().err


def test_dist_bad_eta(tmp_path, capsys):
    _cloud(tmp_path / "a.csv", [0.0])
    assert main(["dist", str(tmp_path / "a.csv"), str(tmp_path / "a.csv"), "--eta", "2"]) == 1


def test_transport_selftest_experiment(tmp_path, capsys):
    path = tmp_path / "t.yaml"
    path.write_text(yaml.safe_dump({"experiment": "transport-selftest", "seed": 0,
                                    "output_dir": str(tmp_path / "o"),
                                    "params": {"instances": 30, "max_size": 5}}))
    assert main(["run", str(path)]) == 0


def test_simulate_writes_paths(tmp_path):
    path = _config(tmp_path, experiment="simulate", params={"write_paths": True},
                   sim={"N": 5, "dt": 0.1, "T": 0.5})
    assert main(["run", str(path)]) in (0, 2)
    text = (tmp_path / "out" / "paths.csv").read_text().splitlines()
    assert text[0] == "t,idx,x0" and len(text) == 1 + 6 * 5
    assert not any(math.isnan(float(v)) for v in text[1].split(","))
