import csv
import hashlib
import json

import pytest

from mrcgat.cli import main
from mrcgat.data import load_csv

SMALL = ["--q", "2", "--batch-size", "2", "--iterations", "2", "--hidden1", "3", "--hidden2", "4",
         "--mlp-hidden", "4", "--infer-ensemble", "2"]


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def data(tmp_path):
    path = tmp_path / "d.csv"
    assert main(["synth", "--seed", "1", "--n-per-class", "6", "--out", str(path)]) == 0
    return path


def test_synth_defaults_and_bytes(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["synth", "--out", str(a)]) == 0
    assert main(["synth", "--out", str(b)]) == 0
    ds = load_csv(a)
    assert len(ds) == 150 and ds.class_counts().tolist() == [50, 50, 50]
    assert sha(a) == sha(b)
    assert "seed: 0" in capsys.readouterr().out


def test_train_prints_config_and_is_deterministic(data, tmp_path, capsys):
    m1, m2, m3 = tmp_path / "m1.json", tmp_path / "m2.json", tmp_path / "m3.json"
    assert main(["train", "--data", str(data), "--out", str(m1), "--trace", str(tmp_path / "t.csv")] + SMALL) == 0
    out = capsys.readouterr().out
    assert "seed: 0" in out and '"q": 2' in out
    assert main(["train", "--data", str(data), "--out", str(m2)] + SMALL) == 0
    assert main(["train", "--data", str(data), "--out", str(m3), "--threads", "3"] + SMALL) == 0
    assert sha(m1) == sha(m2) == sha(m3)
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "iteration,mean_loss"


def test_config_file_overrides_flags(data, tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# comment\niterations = 1\nlambda = 0.3\n")
    model = tmp_path / "m.json"
    assert main(["train", "--data", str(data), "--out", str(model), "--config", str(cfg)] + SMALL) == 0
    doc = json.loads(model.read_text())
    assert doc["config"]["iterations"] == 1 and doc["config"]["shrinkage"] == 0.3


def test_zero_iterations_model(data, tmp_path):
    from mrcgat.model import init_params, load_model
    model = tmp_path / "m.json"
    assert main(["train", "--data", str(data), "--out", str(model)] + SMALL + ["--iterations", "0"]) == 0
    params, arch, cfg, _ = load_model(model)
    init = init_params(arch, cfg.seed)
    assert all((params[k] == init[k]).all() for k in init)


def test_eval_cv_report_stable(data, tmp_path):
    r1, r2 = tmp_path / "r1.json", tmp_path / "r2.json"
    args = ["eval", "--data", str(data), "--folds", "2"] + SMALL
    assert main(args + ["--report", str(r1)]) == 0
    assert main(args + ["--report", str(r2), "--threads", "2"]) == 0
    assert r1.read_bytes() == r2.read_bytes()
    doc = json.loads(r1.read_text())
    assert doc["fold_count"] == 2 and set(doc["aggregate"]) >= {"accuracy_mean", "accuracy_std"}
    assert set(doc["pooled"]["deeproc"]) == {"CN_vs_MCI", "CN_vs_AD", "MCI_vs_AD"}
    assert len(doc["predictions"]) == 18


def test_eval_no_cv_tamper(data, tmp_path):
    model = tmp_path / "m.json"
    assert main(["train", "--data", str(data), "--out", str(model)] + SMALL) == 0
    rep = tmp_path / "r.json"
    assert main(["eval", "--data", str(data), "--model", str(model), "--no-cv", "--report", str(rep)]) == 0
    rows = list(csv.reader(open(data)))
    rows[1][1] = "AD" if rows[1][1] != "AD" else "CN"
    tampered = tmp_path / "t.csv"
    with open(tampered, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    rep2 = tmp_path / "r2.json"
    assert main(["eval", "--data", str(tampered), "--model", str(model), "--no-cv", "--report", str(rep2)]) == 0
    a = json.loads(rep.read_text())["predictions"]
    b = json.loads(rep2.read_text())["predictions"]
    assert a[0]["subject_id"] == b[0]["subject_id"] == rows[1][0]
    assert a[0]["true_label"] != b[0]["true_label"] and a[0]["probs"] == b[0]["probs"]


def test_infer_and_explain(data, tmp_path):
    model = tmp_path / "m.json"
    assert main(["train", "--data", str(data), "--out", str(model)] + SMALL) == 0
    queries = tmp_path / "q.csv"
    assert main(["synth", "--seed", "9", "--n-per-class", "2", "--out", str(queries)]) == 0
    rows = list(csv.reader(open(queries)))
    for r in rows[1:]:
        r[0], r[1] = "Q" + r[0], ""
    with open(queries, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    out = tmp_path / "p.csv"
    assert main(["infer", "--data", str(queries), "--model", str(model), "--support-data", str(data),
                 "--out", str(out)]) == 0
    pred = list(csv.reader(open(out)))
    assert pred[0] == ["subject_id", "predicted", "p_CN", "p_MCI", "p_AD"] and len(pred) == 7
    assert abs(sum(float(v) for v in pred[1][2:]) - 1) < 1e-12
    assert main(["explain", "--data", str(data), "--model", str(model), "--episodes", "3",
                 "--out-dir", str(tmp_path / "x")]) == 0
    assert len((tmp_path / "x" / "gating.csv").read_text().splitlines()) == 7


def test_binary_classes(data, tmp_path):
    model = tmp_path / "m.json"
    assert main(["train", "--data", str(data), "--out", str(model), "--classes", "CN,AD"] + SMALL) == 0
    doc = json.loads(model.read_text())
    assert doc["meta"]["class_names"] == ["CN", "AD"] and doc["architecture"]["n_classes"] == 2


def test_exit_codes(data, tmp_path, capsys):
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "m.json"), "--q", "0"]) == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("subject_id,label,rf_1,cog_1,mri_1\nA,CN,1,x,3\n")
    assert main(["train", "--data", str(bad), "--out", str(tmp_path / "m.json")]) == 2
    assert "line 2" in capsys.readouterr().err
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "m.json"), "--q", "6"]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["train", "--data", str(data), "--bogus"])
    assert exc.value.code == 2


def test_numerical_failure_exit_code(data, tmp_path, monkeypatch):
    import mrcgat.cli as cli
    from mrcgat.errors import NumericalError

    def boom(*a, **k):
        raise NumericalError("non-finite loss at iteration 1 (seed 0)")
    monkeypatch.setattr(cli, "train", boom)
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "m.json")]) == 3


def test_help_lists_every_key(capsys):
    from mrcgat.config import TrainingConfig
    import dataclasses
    with pytest.raises(SystemExit):
        main(["train", "--help"])
    out = capsys.readouterr().out
    for f in dataclasses.fields(TrainingConfig):
        assert "--" + f.name.replace("_", "-") in out
    assert "(default: 6)" in out and "(default: 0.01)" in out and "(default: 1200)" in out
