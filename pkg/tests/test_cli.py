import json

import numpy as np
import pytest

from vectorir.cli import main
from vectorir.design_io import read_instance_values, write_instance_values, parse_design


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--out", str(root / "corpus"), "--designs", "2", "--instances", "200",
                 "--width", "20", "--length", "20", "--vias", "9", "--slices", "2",
                 "--cycles", "2", "--substeps", "2", "--seed", "3"]) == 0
    assert main(["golden", "--out", str(root / "corpus"), "--design", str(root / "corpus")]) == 0
    return root


def test_gen_and_golden_layout(corpus):
    c = corpus / "corpus"
    assert sorted(p.name for p in c.glob("*.design")) == ["design_000.design", "design_001.design"]
    ids, ir = read_instance_values(c / "design_001.golden" / "slice_0001.csv")
    assert len(ids) == 200 and np.all(ir > 0)
    m = dict(line.split("=", 1) for line in (c / "manifest.gen.txt").read_text().splitlines())
    assert m["command"] == "gen" and m["seed"] == "3" and len(m["config_sha256"]) == 64
    assert (c / "manifest.golden.txt").exists()


def test_eval_identical_files(corpus, tmp_path, capsys):
    g = corpus / "corpus" / "design_000.golden" / "slice_0000.csv"
    assert main(["eval", "--out", str(tmp_path / "ev"), "--design",
                 str(corpus / "corpus" / "design_000.design"), "--pred", str(g), "--golden", str(g),
                 "--threshold", "1e-4"]) == 0
    rows = dict(line.split(",") for line in (tmp_path / "ev" / "metrics.csv").read_text().splitlines()[1:])
    assert float(rows["rmse_mV"]) == 0 and float(rows["max_abs_mV"]) == 0
    assert float(rows["accuracy_1x1"]) == 1 and float(rows["accuracy_6x6"]) == 1
    assert "rmse_mV: 0" in capsys.readouterr().out


def test_train_infer_profile_plot(corpus, tmp_path):
    c = corpus / "corpus"
    conf = tmp_path / "train.json"
    conf.write_text(json.dumps({"enc": "3,3,3,3", "dec": [3, 3, 3], "epochs": 2}))
    assert main(["train", "--config", str(conf), "--out", str(tmp_path / "m"), "--design", str(c),
                 "--lr", "1e-3"]) == 0
    log = (tmp_path / "m" / "train_log.csv").read_text().splitlines()
    assert log[0] == "epoch,train_rmse,val_rmse,loss" and len(log) == 3
    w = str(tmp_path / "m" / "model.weights")
    d0 = str(c / "design_000.design")
    assert main(["infer", "--out", str(tmp_path / "p"), "--weights", w, "--design", d0]) == 0
    ids, vals = read_instance_values(tmp_path / "p" / "slice_0001.csv")
    assert ids == list(parse_design(d0).ids) and np.all(np.isfinite(vals))
    assert main(["profile", "--out", str(tmp_path / "pr"), "--weights", w, "--design", d0,
                 "--n-a", "2", "--n-r", "1", "--region", "10"]) == 0
    rep = (tmp_path / "pr" / "report.csv").read_text().splitlines()
    assert rep[0] == "rank,slice_id,region_x,region_y,score_mV" and len(rep) >= 2
    assert main(["plot", "--out", str(tmp_path / "pl"), "--design", d0,
                 "--values", str(tmp_path / "p" / "slice_0000.csv")]) == 0
    assert (tmp_path / "pl" / "slice_0000.ppm").exists()
    assert main(["extract", "--out", str(tmp_path / "f"), "--design", d0, "--weights", w,
                 "--slices", "1"]) == 0
    assert (tmp_path / "f" / "slice_0001" / "manifest.json").exists()


def test_planted_train_infer_eval(corpus, tmp_path):
    c = corpus / "corpus"
    assert main(["train", "--out", str(tmp_path / "m"), "--design", str(c),
                 "--planted", "0", "--enc", "2,2,2,2", "--dec", "2,2,2", "--epochs", "2"]) == 0
    labels = tmp_path / "m" / "design_000.golden" / "slice_0000.csv"
    assert labels.exists()
    assert main(["infer", "--out", str(tmp_path / "p"), "--weights", str(tmp_path / "m" / "model.weights"),
                 "--design", str(c / "design_000.design")]) == 0
    assert main(["eval", "--out", str(tmp_path / "e"), "--design", str(c / "design_000.design"),
                 "--pred", str(tmp_path / "p" / "slice_0000.csv"), "--golden", str(labels)]) == 0
    rows = dict(line.split(",") for line in (tmp_path / "e" / "metrics.csv").read_text().splitlines()[1:])
    gold = read_instance_values(labels)[1]
    # same 2% of label range bound as the planted learning criterion
    assert float(rows["rmse_mV"]) * 1e-3 < 0.02 * np.ptp(gold)


def test_missing_required_flag_exits_nonzero(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["infer", "--out", str(tmp_path / "x"), "--design", "d.design"])
    assert e.value.code != 0
    assert "usage" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_unknown_command_and_flag(capsys):
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code != 0
    with pytest.raises(SystemExit) as e:
        main(["gen", "--out", "o", "--bogus", "1"])
    assert e.value.code != 0
    assert "usage" in capsys.readouterr().err


def test_unknown_config_key(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"nonsense": 1}))
    with pytest.raises(SystemExit) as e:
        main(["gen", "--config", str(conf), "--out", str(tmp_path / "o")])
    assert e.value.code != 0


def test_failure_leaves_no_partial_output(corpus, tmp_path, capsys):
    c = corpus / "corpus"
    bad = tmp_path / "bad.csv"
    write_instance_values(bad, ["nope"], [0.0])
    out = tmp_path / "ev"
    assert main(["eval", "--out", str(out), "--design", str(c / "design_000.design"),
                 "--pred", str(bad), "--golden", str(bad)]) == 1
    assert "error" in capsys.readouterr().err
    assert not out.exists()
    assert [p.name for p in tmp_path.iterdir() if p.name.startswith(".")] == []
    # train on a design without golden labels fails the same way
    d = tmp_path / "lonely"
    d.mkdir()
    (d / "x.design").write_text((c / "design_000.design").read_text())
    assert main(["train", "--out", str(tmp_path / "m"), "--design", str(d), "--epochs", "1"]) == 1
    assert not (tmp_path / "m").exists()


def test_malformed_design_reports_line(tmp_path, capsys):
    f = tmp_path / "broken.design"
    f.write_text("DESIGN format_version=1 width=10 length=10 vdd=0.7 cycles=2 substeps=2\nINSTANCES count=x\n")
    assert main(["golden", "--out", str(tmp_path / "g"), "--design", str(f)]) == 1
    err = capsys.readouterr().err
    assert "broken.design:2:" in err
