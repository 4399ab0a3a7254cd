import json
import subprocess
import sys

import numpy as np
import pytest

from nnci.cli import main
from nnci.neighbors import NeighborFeatures

TINY_SET = ["--set", "arch.rep_layers=[8,8]", "--set", "arch.head_layers=[4]", "--set", "train.max_epochs=3"]


@pytest.fixture
def data(tmp_path):
    assert main(["generate", "--n", "300", "--seed", "1", "--out", str(tmp_path / "d.csv")]) == 0
    assert main(["generate", "--n", "80", "--seed", "2", "--out", str(tmp_path / "test.csv")]) == 0
    return tmp_path


def test_generate_header(data):
    assert (data / "d.csv").read_text().splitlines()[0] == "t,y,mu0,mu1,x1"


def test_features_default_excludes_self(data):
    out = data / "f.csv"
    assert main(["features", "--data", str(data / "d.csv"), "--k", "3", "--metric", "manhattan",
                 "--out", str(out)]) == 0
    f = NeighborFeatures.from_csv(out)
    assert len(f) == 300
    assert main(["features", "--data", str(data / "d.csv"), "--k", "3", "--include-self",
                 "--out", str(data / "g.csv")]) == 0
    g = NeighborFeatures.from_csv(data / "g.csv")
    assert not np.array_equal(f.ybar0, g.ybar0)
    assert main(["features", "--data", str(data / "d.csv"), "--query", str(data / "test.csv"),
                 "--subsample", "50", "--out", str(data / "h.csv")]) == 0
    assert len(NeighborFeatures.from_csv(data / "h.csv")) == 80


def test_train_and_evaluate(data, capsys):
    cfg = data / "c.yaml"
    cfg.write_text("arch:\n  rep_layers: [8, 8]\n  head_layers: [4]\n", encoding="utf-8")
    model = data / "m.json"
    assert main(["train", "--data", str(data / "d.csv"), "--config", str(cfg), "--max-epochs", "3",
                 "--metric", "manhattan", "--k", "5", "--history", str(data / "h.csv"), "--out", str(model)]) == 0
    assert (data / "h.csv").read_text().startswith("stage,epoch,train_loss")
    capsys.readouterr()
    assert main(["evaluate", "--model", str(model), "--train", str(data / "d.csv"), "--test",
                 str(data / "test.csv"), "--out", str(data / "ite.csv")]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["n"] == 80 and "eps_pehe" in result
    lines = (data / "ite.csv").read_text().splitlines()
    assert lines[0].startswith("# config_hash=") and lines[1] == "row,ite_hat,true_ite" and len(lines) == 82


def test_profile_and_stats_on_wide_matrix(tmp_path, capsys):
    wide = tmp_path / "w.csv"
    wide.write_text("problem,A,B\n1,1,2\n2,4,2\n3,1,3\n", encoding="utf-8")
    assert main(["profile", "--scores", str(wide), "--points", "5", "--out", str(tmp_path / "p.csv")]) == 0
    assert main(["stats", "--scores", str(wide), "--out", str(tmp_path / "r.csv")]) == 0
    out = capsys.readouterr().out
    assert "control: A" in out
    assert (tmp_path / "r.csv").read_text().splitlines()[1] == "Model,FAR,p_F-value,H0"


def test_run_and_report(tmp_path):
    out = tmp_path / "run"
    rc = main(["run", "--n", "200", "--realizations", "2", "--k", "5", "--output-dir", str(out),
               "--set", "models=[{family: tarnet, nn_variant: false}, {family: tarnet, metric: manhattan}]",
               *TINY_SET])
    assert rc == 0
    assert main(["report", "--run-dir", str(out), "--out", str(tmp_path / "report.md")]) == 0
    text = (tmp_path / "report.md").read_text()
    assert "| Model | FAR | p_F-value | H0 |" in text and "NN-TARnet (Manhattan)" in text


def test_report_refuses_mixed_hashes(tmp_path, capsys):
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    a.write_text("# config_hash=aaaa\nmodel,tau,log10_tau,rho\nA,1.0,0.0,1.0\n")
    b.write_text("# config_hash=bbbb\nmodel,tau,log10_tau,rho\nA,1.0,0.0,1.0\n")
    assert main(["report", "--profiles", str(a), str(b), "--out", str(tmp_path / "r.md")]) == 2
    assert "refusing to mix" in capsys.readouterr().err


def test_errors_exit_with_status_two(tmp_path, capsys):
    assert main(["features", "--data", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "f.csv")]) == 2
    assert main(["run", "--k", "0", "--output-dir", str(tmp_path / "o")]) == 2
    assert "error" in capsys.readouterr().err


def test_partial_run_exits_one(tmp_path):
    rc = main(["run", "--n", "60", "--realizations", "1", "--k", "40", "--output-dir", str(tmp_path / "o"),
               *TINY_SET])
    assert rc == 1
    assert (tmp_path / "o" / "failures.csv").exists()
    assert (tmp_path / "o" / "scores.csv").exists()


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "nnci.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "0.1.0" in proc.stdout
