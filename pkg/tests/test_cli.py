import csv
import json

import pytest

from mmcdet.cli import main
from mmcdet.data import Dataset
from mmcdet.config import ModelConfig, TrainConfig, dump_config
from mmcdet.report import build_report, summarize


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = TrainConfig(model=ModelConfig(embed_dim=16, depth=1, heads=2, extra_channels=(16, 16)),
                      steps=3, batch_size=2)
    (root / "small.ini").write_text(dump_config(cfg))
    assert main(["synth", "--out", str(root / "data"), "--n-train", "12", "--n-test", "6", "--seed", "1"]) == 0
    return root


def test_synth_counts(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "d"), "--n-train", "120", "--n-test", "80"]) == 0
    ds = Dataset.load(tmp_path / "d")
    assert len(ds.split("train")) == 120 and len(ds.split("all")) == 80
    assert "train 120" in capsys.readouterr().out


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main([]) == 2
    assert main(["nope"]) == 2
    assert main(["synth"]) == 2
    assert main(["train", "--data", str(tmp_path), "--variant", "bogus"]) == 2
    capsys.readouterr()


def test_bad_override_exit_2(workspace):
    args = ["--config", str(workspace / "small.ini"), "train", "--data", str(workspace / "data"),
            "--out", str(workspace / "x"), "no_such_key=1"]
    assert main(args) == 2


def test_missing_data_exit_1(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "r")]) == 1
    assert capsys.readouterr().err.startswith("mmcdet train: ")


def test_train_eval_attack_report(workspace, capsys):
    run = workspace / "run"
    base = ["--config", str(workspace / "small.ini")]
    assert main(base + ["train", "--data", str(workspace / "data"), "--variant", "mmc", "--out", str(run),
                        "lr=0.001"]) == 0
    man = json.loads((run / "manifest.json").read_text())
    assert man["run_id"] == "run" and man["variant"] == "mmc" and "lr = 0.001" in man["config"]
    for name in ("checkpoint.mmck", "loss_log.csv", "config.ini"):
        assert (run / name).exists()

    assert main(["eval", "--run", str(run)]) == 0
    assert main(["eval", "--run", str(run), "--network", "thm", "--split", "night"]) == 0
    assert main(["attack", "--run", str(run), "--eps-grid", "0,4", "--iterations", "1", "--limit", "3",
                 "--hide", "car"]) == 0
    assert main(["attack", "--run", str(run), "--hide", "dog"]) == 2
    capsys.readouterr()

    out = workspace / "report"
    assert main(["report", str(run / "eval.csv"), str(run / "eval_thm.csv"), str(run / "attack.csv"),
                 str(run / "loss_log.csv"), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert text.splitlines()[0] == "variant,split,mAP,F1,n_runs"
    variants = {r["variant"] for r in csv.DictReader(open(out / "summary.csv"))}
    assert variants == {"mmc", "mmc[thm]"}
    for name in ("summary.png", "attack.png", "attack.csv"):
        assert (out / name).stat().st_size > 0


def test_report_requires_metric_csv(tmp_path):
    p = tmp_path / "junk.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        build_report([p], tmp_path / "out")
    assert main(["report", str(p), "--out", str(tmp_path / "o")]) == 1


def test_summarize_averages_runs():
    rows = [dict(run_id=f"r{k}", variant="rgb", split="all", **{"class": "mean"}, AP=str(a), F1=str(f))
            for k, (a, f) in enumerate([(0.4, 0.2), (0.6, 0.4)])]
    rows.append(dict(run_id="r0", variant="rgb", split="all", **{"class": "1"}, AP="0.9", F1="0.9"))
    rows.append(dict(run_id="t0", variant="thermal", split="night", **{"class": "mean"}, AP="0.7", F1="0.1"))
    assert summarize(rows) == [["rgb", "all", "0.500000", "0.300000", 2],
                               ["thermal", "night", "0.700000", "0.100000", 1]]
