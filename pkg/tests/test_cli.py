import csv
import json

import numpy as np
import pytest

from geossl import cli, metrics
from geossl.synthdata import load_dataset

TINY_DATA = ["--data-train-per-class", "2", "--data-test-per-class", "1", "--data-points", "64",
             "--data-dense-points", "256", "--no-data-transfer"]
TINY_NET = ["--edge-channels", "4,4", "--embed-dim", "8", "--cls-hidden", "8,4",
            "--reg-hidden", "8,4", "--k-graph", "5", "--epochs", "2", "--batch-size", "4"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == 0 and out else out), err


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    assert cli.main(["gen", "--out", str(root), *TINY_DATA]) == 0
    (d,) = root.glob("gen-*")
    return d


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_gen_writes_balanced_dataset_and_manifest(data_dir):
    manifest = json.loads((data_dir / "manifest.json").read_text())
    assert manifest["kind"] == "run_manifest" and manifest["schema_version"] == 1
    assert set(manifest["outputs"]) == {"train.json", "test.json"}
    train = load_dataset(data_dir / "train.json")
    assert np.bincount(train.class_labels).tolist() == [2] * 5
    for src in ("geossl", "geopl"):
        g, degenerate = train.labels[src]
        assert g.shape == (10, 64, 4) and degenerate.shape == (10, 64)
        assert np.isfinite(g).all()


def test_gen_same_seed_same_hashes(tmp_path, capsys, data_dir):
    code, out, _ = run(capsys, "gen", "--run-dir", tmp_path / "again", *TINY_DATA)
    assert code == 0
    a = json.loads((data_dir / "manifest.json").read_text())["outputs"]
    b = json.loads((tmp_path / "again" / "manifest.json").read_text())["outputs"]
    assert a == b


def test_run_dir_named_by_spec_hash(tmp_path, capsys):
    env_root = tmp_path / "env"
    code, out, _ = run(capsys, "gen", "--out", env_root, *TINY_DATA, "--data-seed", "3")
    manifest = json.loads((env_root.glob("gen-*").__next__() / "manifest.json").read_text())
    assert out["run_dir"].endswith("gen-" + manifest["spec_sha256"][:12])


def test_env_var_sets_output_root(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "fromenv"))
    code, out, _ = run(capsys, "gen", *TINY_DATA)
    assert code == 0 and out["run_dir"].startswith(str(tmp_path / "fromenv"))


def test_config_file_with_flag_override(tmp_path, capsys, data_dir):
    cfg = {"model": {"edge_channels": [4, 4], "embed_dim": 8, "cls_hidden": [8, 4],
                     "reg_hidden": [8, 4], "k_graph": 5},
           "train": {"epochs": 3, "batch_size": 4, "lam": 0.5}}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    code, out, _ = run(capsys, "train", "--config", path, "--data", data_dir, "--epochs", "1",
                       "--run-dir", tmp_path / "r")
    assert code == 0
    spec = json.loads((tmp_path / "r" / "manifest.json").read_text())["spec"]
    assert spec["train"]["epochs"] == 1 and spec["train"]["lam"] == 0.5
    assert spec["model"]["embed_dim"] == 8


@pytest.fixture(scope="module")
def train_runs(tmp_path_factory, data_dir):
    root = tmp_path_factory.mktemp("train")
    base = ["--data", str(data_dir), *TINY_NET]
    assert cli.main(["train", "--run-dir", str(root / "none"), *base, "--supervision", "none"]) == 0
    assert cli.main(["train", "--run-dir", str(root / "geossl"), *base, "--lambda", "0.01"]) == 0
    assert cli.main(["train", "--run-dir", str(root / "lam0"), *base, "--lambda", "0"]) == 0
    return root


def test_train_outputs(train_runs):
    d = train_runs / "geossl"
    names = {p.name for p in d.iterdir()}
    assert {"checkpoint.json", "history.csv", "report.json", "predictions.json",
            "manifest.json"} <= names
    rows = read_csv(d / "history.csv")
    assert list(rows[0]) == ["epoch", "lr", "task_loss", "reg_loss", "total", "phase"]
    assert [int(r["epoch"]) for r in rows] == [0, 1]
    text = (d / "history.csv").read_text() + (d / "manifest.json").read_text()
    assert "time" not in text


def test_baseline_and_geossl_reports_share_schema(train_runs):
    a = json.loads((train_runs / "none" / "report.json").read_text())
    b = json.loads((train_runs / "geossl" / "report.json").read_text())
    assert set(a) == set(b) and a["schema_version"] == 1


def test_lambda_zero_matches_baseline(train_runs):
    for name in ("report.json", "predictions.json", "checkpoint.json"):
        a = (train_runs / "none" / name).read_bytes()
        b = (train_runs / "lam0" / name).read_bytes()
        if name == "checkpoint.json":
            pa = json.loads(a)["params"]
            pb = json.loads(b)["params"]
            assert pa == pb
        else:
            assert a == b


def test_report_recomputable_from_predictions(train_runs):
    d = train_runs / "geossl"
    report = json.loads((d / "report.json").read_text())
    preds = json.loads((d / "predictions.json").read_text())
    truth = np.asarray(preds["class_labels"])
    pred = np.asarray(preds["predicted_class"])
    assert report["overall_accuracy"] == metrics.overall_accuracy(pred, truth)
    assert report["mean_class_accuracy"] == metrics.mean_class_accuracy(pred, truth)


def test_eval_reproduces_train_report(train_runs, data_dir, tmp_path, capsys):
    code, _, _ = run(capsys, "eval", "--data", data_dir, "--checkpoint",
                     train_runs / "geossl" / "checkpoint.json", "--run-dir", tmp_path / "e")
    assert code == 0
    assert (tmp_path / "e" / "report.json").read_bytes() == \
        (train_runs / "geossl" / "report.json").read_bytes()


def test_rerun_identical(train_runs, tmp_path, capsys):
    code, out, _ = run(capsys, "rerun", train_runs / "geossl", "--run-dir", tmp_path / "again")
    assert code == 0 and out["identical"] and out["differing_outputs"] == []


def test_rerun_detects_tampering(train_runs, tmp_path, capsys):
    src = train_runs / "none"
    doc = json.loads((src / "manifest.json").read_text())
    doc["outputs"]["report.json"] = "0" * 64
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    code, out, _ = run(capsys, "rerun", tmp_path / "manifest.json", "--run-dir", tmp_path / "x")
    assert code == cli.EXIT_MISMATCH
    assert json.loads(out)["differing_outputs"] == ["report.json"]


def test_error_json_and_exit_code(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--data", tmp_path / "missing")
    assert code == cli.EXIT_ERROR
    doc = json.loads(err)
    assert doc["kind"] == "error" and doc["command"] == "train"


def test_runtime_error_written_to_run_dir(tmp_path, capsys, data_dir):
    # a checkpoint that disagrees with the dataset's class count fails inside the run
    code, _, _ = run(capsys, "train", "--data", data_dir, *TINY_NET, "--num-classes", "2",
                     "--run-dir", tmp_path / "bad")
    assert code == cli.EXIT_ERROR
    doc = json.loads((tmp_path / "bad" / "error.json").read_text())
    assert doc["schema_version"] == 1 and doc["error_type"]


def test_invalid_config_value_rejected(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--supervision", "bogus", *TINY_DATA,
                       "--out", tmp_path)
    assert code == cli.EXIT_ERROR and "supervision" in json.loads(err)["message"]


def test_sweep_grid_and_report_tool(tmp_path, capsys, data_dir):
    code, out, _ = run(capsys, "sweep-lambda", "--data", data_dir, *TINY_NET, "--seeds", "0,1",
                       "--run-dir", tmp_path / "s")
    assert code == 0
    rows = read_csv(tmp_path / "s" / "sweep.csv")
    assert list(rows[0]) == ["lambda", "seed", "oa", "ma"]
    assert len(rows) == 6 * 2
    assert sorted({float(r["lambda"]) for r in rows}) == sorted([1, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5])
    code, agg, _ = run(capsys, "report", tmp_path / "s" / "sweep.csv", "--by", "lambda",
                       "--value", "oa")
    assert code == 0 and len(agg["groups"]) == 6
    assert all(g["n"] == 2 for g in agg["groups"])


def test_ablation_grid(tmp_path, capsys, data_dir):
    code, _, _ = run(capsys, "ablate-props", "--data", data_dir, *TINY_NET, "--seeds", "0",
                     "--run-dir", tmp_path / "a")
    assert code == 0
    rows = read_csv(tmp_path / "a" / "ablation.csv")
    assert len(rows) == 8
    assert {(r["properties"], r["mode"]) for r in rows} == {
        (p, m) for p in ("P", "P+n", "P+u", "P+n+u") for m in ("input", "supervision")}
    cells = {(r["properties"], r["mode"]): r for r in rows}
    # P as input uses no properties at all, so it is the baseline configuration
    assert cells[("P", "input")]["oa"] == cells[("P", "supervision")]["oa"]
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert all("mean" in c and "std" in c for c in summary["cells"])


def test_noise_clean_case(tmp_path, capsys, data_dir):
    code, _, _ = run(capsys, "noise", "--data", data_dir, *TINY_NET, "--sigma", "0",
                     "--gt-source", "geossl", "--label-source", "geossl",
                     "--run-dir", tmp_path / "n")
    assert code == 0
    rep = json.loads((tmp_path / "n" / "noise.json").read_text())
    assert rep["cosine_distance"]["pca_outward"] <= 1e-6


def test_noise_report_schema(tmp_path, capsys, data_dir):
    code, _, _ = run(capsys, "noise", "--data", data_dir, *TINY_NET, "--seeds", "0,1",
                     "--run-dir", tmp_path / "n")
    assert code == 0
    rep = json.loads((tmp_path / "n" / "noise.json").read_text())
    assert rep["sigma"] == 0.01 and rep["schema_version"] == 1
    first = rep["runs"][0]
    assert np.asarray(first["per_point_deg"]["learned"]).shape == (5, 64)
    hist = first["histograms"]["pca_none"]
    assert set(hist) == {"0-5", "5-10", "10-15", "15-20", "20-25", "25-30", ">=30"}
    assert 0 < sum(hist.values()) <= 5 * 64
    assert "per_point_deg" not in rep["runs"][1]
    assert len(read_csv(tmp_path / "n" / "noise.csv")) == 2


def test_probe_rows(tmp_path, capsys, data_dir):
    code, _, _ = run(capsys, "probe", "--data", data_dir, *TINY_NET, "--seeds", "0,1",
                     "--run-dir", tmp_path / "p")
    assert code == 0
    rows = read_csv(tmp_path / "p" / "probe.csv")
    assert list(rows[0]) == ["variant", "seed", "cosine_similarity"]
    assert [r["variant"] for r in rows] == ["scratch"] * 2 + ["frozen"] * 2 + ["geossl"] * 2


def test_workers_do_not_change_results(tmp_path, capsys, data_dir):
    args = ["sweep-lambda", "--data", data_dir, *TINY_NET, "--seeds", "0", "--lambdas", "1,0.01"]
    assert run(capsys, *args, "--run-dir", tmp_path / "w1")[0] == 0
    assert run(capsys, *args, "--run-dir", tmp_path / "w2", "--workers", "2")[0] == 0
    assert (tmp_path / "w1" / "sweep.csv").read_bytes() == (tmp_path / "w2" / "sweep.csv").read_bytes()


def test_props_from_mesh(tmp_path, capsys):
    off = tmp_path / "tet.off"
    off.write_text("OFF\n4 4 0\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n3 0 1 2\n3 0 1 3\n3 0 2 3\n3 1 2 3\n")
    code, out, _ = run(capsys, "props", off, "--points", "128", "--k", "10",
                       "--run-dir", tmp_path / "p")
    assert code == 0 and out["result"]["num_points"] == 128
    rows = read_csv(tmp_path / "p" / "props.csv")
    assert len(rows) == 128 and list(rows[0]) == ["index", "nx", "ny", "nz", "u", "degenerate"]
    doc = json.loads((tmp_path / "p" / "props.json").read_text())
    assert doc["schema_version"] == 1
    code, _, _ = run(capsys, "rerun", tmp_path / "p", "--run-dir", tmp_path / "p2")
    assert code == 0


def test_props_rejects_unknown_format(tmp_path, capsys):
    bad = tmp_path / "cloud.ply"
    bad.write_text("ply\n")
    code, _, err = run(capsys, "props", bad, "--out", tmp_path)
    assert code == cli.EXIT_ERROR and "xyz" in json.loads(err)["message"]
