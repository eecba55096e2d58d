import hashlib
import json

import pytest

from calibfair.cli import UsageError, main, parse_seeds
from calibfair.data import PRESETS, load_csv

FAST = ["--stage1-epochs", "2", "--stage2-epochs", "3", "--hidden", "8", "--folds", "2"]


@pytest.fixture(scope="module")
def small_csv(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    spec = PRESETS["biased-binary"].to_dict()
    spec.update(n_samples=400, n_features=4)
    (root / "small.json").write_text(json.dumps(spec))
    assert main(["gen-data", "--spec", str(root / "small.json"), "--seed", "1", "--out", str(root / "small.csv")]) == 0
    return root / "small.csv"


def test_parse_seeds():
    assert parse_seeds("0..4") == [0, 1, 2, 3, 4]
    assert parse_seeds("3") == [3]
    assert parse_seeds("0,2,5") == [0, 2, 5]
    for bad in ["0..", "a..b", "4..0", "1,,2", "1,1", "-1", ""]:
        with pytest.raises(UsageError):
            parse_seeds(bad)


def test_gen_data_preset(tmp_path):
    out = tmp_path / "data.csv"
    assert main(["gen-data", "--preset", "biased-binary", "--seed", "7", "--out", str(out)]) == 0
    spec = json.loads((tmp_path / "data.spec.json").read_text())
    assert spec["seed"] == 7 and spec["spec"]["n_samples"] == 4000
    header = out.read_text().splitlines()[0].split(",")
    assert header[:2] == ["f0", "f1"] and "label" in header and "attr_age" in header
    first = out.read_bytes()
    assert main(["gen-data", "--preset", "biased-binary", "--seed", "7", "--out", str(out)]) == 0
    assert out.read_bytes() == first


def test_gen_data_multiclass(tmp_path):
    out = tmp_path / "mc.csv"
    assert main(["gen-data", "--preset", "biased-multiclass", "--out", str(out)]) == 0
    assert load_csv(out).num_classes == 7


def test_gen_data_spec_file_roundtrip(tmp_path, small_csv):
    # the written spec JSON is itself a valid --spec input
    out = tmp_path / "again.csv"
    assert main(["gen-data", "--spec", str(small_csv.with_name("small.spec.json")), "--seed", "1",
                 "--out", str(out)]) == 0
    assert out.read_bytes() == small_csv.read_bytes()


def test_gen_data_invalid_spec(tmp_path, capsys):
    bad = PRESETS["biased-binary"].to_dict()
    bad["group_noise_rates"] = {"age": [0.0, 0.7]}
    (tmp_path / "bad.json").write_text(json.dumps(bad))
    assert main(["gen-data", "--spec", str(tmp_path / "bad.json"), "--out", str(tmp_path / "x.csv")]) == 2
    assert "group_noise_rates" in capsys.readouterr().err
    assert not (tmp_path / "x.csv").exists()


def test_train_writes_run_directory(tmp_path, small_csv, capsys):
    code = main(["train", "--method", "cluster-focal", "--data", str(small_csv), "--seed", "0",
                 "--attrs", "sex,age", "--out", str(tmp_path), *FAST])
    assert code == 0
    run = tmp_path / "cluster-focal_seed0"
    names = {p.name for p in run.iterdir()}
    assert {"manifest.json", "model.ckpt", "clusters.json", "eval_sex.json", "eval_age.json",
            "loss_trace.csv"} <= names
    assert not any(n.startswith(".") for n in names)
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["status"] == "complete" and manifest["finished"]
    assert manifest["data"]["digest"] == "sha256:" + hashlib.sha256(small_csv.read_bytes()).hexdigest()
    assert manifest["config"]["num_clusters"] == 4
    assert set(manifest["outputs"]) == names - {"manifest.json"}
    clusters = json.loads((run / "clusters.json").read_text())
    assert sum(clusters["counts"]) == 320
    # summary lines carry the report values
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2
    for line, attr in zip(lines, ["sex", "age"]):
        rep = json.loads((run / f"eval_{attr}.json").read_text())
        fields = dict(kv.split("=") for kv in line.split())
        assert fields["attr"] == attr
        assert float(fields["worstF1"]) == pytest.approx(rep["worst_performance"]["value"], abs=5e-7)
        assert float(fields["worstQECE"]) == pytest.approx(rep["worst_qece"]["value"], abs=5e-7)


def test_train_oracle_without_attribute(tmp_path, small_csv, capsys):
    assert main(["train", "--method", "oracle-focal", "--data", str(small_csv), "--out", str(tmp_path)]) == 2
    assert "oracle" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["train", "--method", "eiil"],
    ["train", "--method", "erm", "--attrs", "zip"],
    ["train", "--method", "erm", "--bins", "0"],
    ["train", "--method", "erm", "--split", "0.5,0.5"],
    ["train", "--method", "erm", "--gap-mode", "sideways"],
    ["sweep", "--methods", "erm", "--seeds", "0..x"],
    ["sweep", "--methods", "erm,,focal"],
])
def test_usage_errors_exit_2(tmp_path, small_csv, argv):
    assert main([*argv, "--data", str(small_csv), "--out", str(tmp_path)]) == 2


def test_missing_and_malformed_data(tmp_path, capsys):
    assert main(["train", "--method", "erm", "--data", str(tmp_path / "none.csv"), "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("f0,label,attr_a\n0.1,0,0\nx,1,1\n")
    assert main(["train", "--method", "erm", "--data", str(bad), "--out", str(tmp_path)]) == 2
    assert "row 3" in capsys.readouterr().err


def test_divergence_exits_1(tmp_path, small_csv, capsys):
    assert main(["train", "--method", "erm", "--data", str(small_csv), "--out", str(tmp_path),
                 "--lr", "1e300", *FAST]) == 1
    assert "epoch" in capsys.readouterr().err
    manifest = json.loads((tmp_path / "erm_seed0" / "manifest.json").read_text())
    assert manifest["status"] == "failed"


def test_no_command_exits_2():
    assert main([]) == 2


def test_eval_reproduces_train_report(tmp_path, small_csv):
    assert main(["train", "--method", "focal", "--data", str(small_csv), "--out", str(tmp_path), *FAST]) == 0
    run = tmp_path / "focal_seed0"
    out = tmp_path / "re"
    assert main(["eval", "--checkpoint", str(run / "model.ckpt"), "--data", str(small_csv),
                 "--subset", "test", "--out", str(out)]) == 0
    for attr in ("age", "sex"):
        a = json.loads((run / f"eval_{attr}.json").read_text())
        b = json.loads((out / f"eval_{attr}.json").read_text())
        a.pop("selected_epoch")
        assert a == b


def test_eval_rejects_mismatched_checkpoint(tmp_path, small_csv):
    assert main(["train", "--method", "erm", "--data", str(small_csv), "--out", str(tmp_path), *FAST]) == 0
    other = tmp_path / "wide.csv"
    assert main(["gen-data", "--preset", "biased-binary", "--out", str(other)]) == 0
    assert main(["eval", "--checkpoint", str(tmp_path / "erm_seed0" / "model.ckpt"), "--data", str(other),
                 "--out", str(tmp_path / "e")]) == 2
    junk = tmp_path / "junk.ckpt"
    junk.write_text("nope\n")
    assert main(["eval", "--checkpoint", str(junk), "--data", str(small_csv), "--out", str(tmp_path / "e")]) == 2


def test_sweep_outputs(tmp_path, small_csv, capsys):
    code = main(["sweep", "--methods", "erm,focal,cluster-focal", "--seeds", "0..1", "--data", str(small_csv),
                 "--out", str(tmp_path), *FAST])
    assert code == 0
    lines = (tmp_path / "tradeoff.csv").read_text().splitlines()
    rows = [l.split(",") for l in lines[1:]]
    assert len(rows) == 6
    assert sum(r[1] == "age" for r in rows) == 3
    table = json.loads((tmp_path / "tradeoff.json").read_text())
    assert table["metric"] == "f1" and len(table["rows"]) == 6
    for m in ("erm", "focal", "cluster-focal"):
        rel = (tmp_path / f"reliability_{m}.csv").read_text().splitlines()
        assert rel[0] == "method,seed,attribute,group,bin,lower,upper,count,mean_confidence,accuracy"
        for s in (0, 1):
            assert (tmp_path / f"{m}_seed{s}" / "model.ckpt").exists()
    assert len(capsys.readouterr().out.strip().splitlines()) == 6


def test_sweep_single_run_equals_train(tmp_path, small_csv):
    args = ["--data", str(small_csv), *FAST]
    assert main(["sweep", "--methods", "jtt", "--seeds", "2", "--out", str(tmp_path / "s"), *args]) == 0
    assert main(["train", "--method", "jtt", "--seed", "2", "--out", str(tmp_path / "t"), *args]) == 0
    row = json.loads((tmp_path / "s" / "tradeoff.json").read_text())["rows"][0]
    rep = json.loads((tmp_path / "t" / "jtt_seed2" / f"eval_{row['attribute']}.json").read_text())
    assert row["worst_qece_mean"] == rep["worst_qece"]["value"]
    assert row["worst_perf_mean"] == rep["worst_performance"]["value"]
    assert row["worst_qece_std"] == 0.0


def test_sweep_threads_env(tmp_path, small_csv, monkeypatch):
    monkeypatch.setenv("CALIBFAIR_THREADS", "many")
    assert main(["sweep", "--methods", "erm", "--seeds", "0", "--data", str(small_csv), "--out", str(tmp_path),
                 *FAST]) == 2
    monkeypatch.setenv("CALIBFAIR_THREADS", "2")
    assert main(["sweep", "--methods", "erm", "--seeds", "0,1", "--data", str(small_csv),
                 "--out", str(tmp_path / "p"), *FAST]) == 0
    monkeypatch.setenv("CALIBFAIR_THREADS", "1")
    assert main(["sweep", "--methods", "erm", "--seeds", "0,1", "--data", str(small_csv),
                 "--out", str(tmp_path / "q"), *FAST]) == 0
    assert (tmp_path / "p" / "tradeoff.csv").read_bytes() == (tmp_path / "q" / "tradeoff.csv").read_bytes()


def test_outputs_idempotent(tmp_path, small_csv):
    argv = ["train", "--method", "cluster-groupdro", "--data", str(small_csv), "--out", str(tmp_path), *FAST]
    assert main(argv) == 0
    run = tmp_path / "cluster-groupdro_seed0"
    first = {p.name: p.read_bytes() for p in run.iterdir() if p.name != "manifest.json"}
    assert "group_weights.csv" in first
    assert main(argv) == 0
    assert {p.name: p.read_bytes() for p in run.iterdir() if p.name != "manifest.json"} == first
