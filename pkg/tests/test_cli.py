import json

import pytest

from bcastnet.cli import main

SMALL = ["--num-blocks", "1", "--f", "2"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    assert main(["make-micro", "--out", str(base / "audio")]) == 0
    return base / "audio", base / "cache"


def _data(corpus):
    root, cache = corpus
    return ["--root", str(root), "--dataset", "micro", "--cache", str(cache)]


def _train(corpus, out, *extra):
    return main(["train", *_data(corpus), "--variant", "Proposed", "--out", str(out),
                 "--k", "4", "--max-epochs", "2", "--batch", "4", *SMALL, *extra])


def test_preprocess_then_rerun_is_cached(corpus, capsys):
    assert main(["preprocess", *_data(corpus)]) == 0
    out = capsys.readouterr().out
    assert "class0" in out and "total" in out
    assert "2 classes, 16 files, 44x128" in out
    assert main(["preprocess", *_data(corpus)]) == 0
    assert "0 converted, 16 cached, 0 failed" in capsys.readouterr().out


def test_preprocess_bad_root(tmp_path, capsys):
    assert main(["preprocess", "--root", str(tmp_path / "nope"), "--dataset", "gtzan",
                 "--cache", str(tmp_path / "c")]) != 0
    assert "does not exist" in capsys.readouterr().err


def test_inspect_reports_budget_and_deltas(tmp_path, capsys):
    assert main(["inspect", "--variant", "Proposed", "--csv-out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "total trainable ≈ 167k (166698)" in out
    assert "delta vs BaselineBBNN: -18,880 (18,880 fewer)" in out
    assert "conv census: total=22, 1x1=17, 3x3=5" in out
    assert (tmp_path / "params.csv").exists()
    trace = (tmp_path / "shape_trace.csv").read_text().splitlines()
    assert trace[0] == "layer,shape" and any("x544x" in line for line in trace)
    assert main(["inspect", "--variant", "Remove3x3"]) == 0
    assert "-27,744" in capsys.readouterr().out


def test_inspect_unknown_variant():
    with pytest.raises(SystemExit):
        main(["inspect", "--variant", "Bogus"])


def test_train_writes_artifacts(corpus, tmp_path, capsys):
    out = tmp_path / "run"
    assert _train(corpus, out) == 0
    for name in ("config.json", "history.csv", "report.json", "confusion.csv",
                 "confusion_normalized.csv", "checkpoint/manifest.json"):
        assert (out / name).exists(), name
    assert "Proposed micro fold 0" in capsys.readouterr().out
    report = json.loads((out / "report.json").read_text())
    assert report["reported_fold"] == 0 and len(report["folds"]) == 1
    history = (out / "history.csv").read_text().splitlines()
    assert history[0].startswith("epoch,lr") and 2 <= len(history) <= 3


def test_config_file_and_flag_precedence(corpus, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train": {"max_epochs": 1, "lr0": 0.003, "seed": 5}}))
    out = tmp_path / "run"
    assert main(["train", *_data(corpus), "--variant", "Proposed", "--out", str(out), "--k", "4",
                 "--config", str(cfg), "--seed", "9", *SMALL]) == 0
    echoed = json.loads((out / "config.json").read_text())["train"]
    assert echoed["max_epochs"] == 1 and echoed["lr0"] == 0.003 and echoed["seed"] == 9


def test_train_rejects_bad_fold(corpus, tmp_path, capsys):
    assert _train(corpus, tmp_path / "run", "--fold", "7") == 2
    assert "fold must be in" in capsys.readouterr().err


def test_xval_resumes_and_eval(corpus, tmp_path, capsys):
    out = tmp_path / "xv"
    args = ["xval", *_data(corpus), "--variant", "Proposed", "--out", str(out), "--k", "4",
            "--max-epochs", "1", "--batch", "4", *SMALL]
    assert main(args) == 0
    assert "mean test accuracy" in capsys.readouterr().out
    assert sorted(p.name for p in out.glob("fold_*")) == [f"fold_0{i}" for i in range(4)]
    stamp = (out / "fold_02" / "history.csv").stat().st_mtime_ns
    assert main(args) == 0
    assert (out / "fold_02" / "history.csv").stat().st_mtime_ns == stamp
    agg = json.loads((out / "report.json").read_text())
    assert len(agg["folds"]) == 4
    assert len((out / "comparison.csv").read_text().splitlines()) == 2

    ev = tmp_path / "ev"
    assert main(["eval", *_data(corpus), "--checkpoint", str(out / "fold_01" / "checkpoint"),
                 "--split", "all", "--out", str(ev)]) == 0
    assert "on 16 samples (all)" in capsys.readouterr().out
    assert len((ev / "confusion.csv").read_text().splitlines()) == 3

    table = tmp_path / "cmp.csv"
    assert main(["compare", "--reports", str(out / "fold_*" / "report.json"),
                 "--out", str(table)]) == 0
    assert table.read_text().splitlines()[1].startswith("Proposed,")


def test_compare_empty_glob(tmp_path, capsys):
    assert main(["compare", "--reports", str(tmp_path / "*.json")]) == 2
    assert "no reports match" in capsys.readouterr().err
