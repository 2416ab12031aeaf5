import json

import numpy as np
import pytest

from stainstyle import cli
from stainstyle.data import load_manifest, read_png, write_png

D = 16
TINY = {
    "epochs": 1,
    "batch_size": 8,
    "classifier_width": 4,
    "classifier_depth": 2,
    "classifier_blocks": 1,
    "generator_width": 4,
    "generator_depth": 2,
    "discriminator_width": 4,
    "discriminator_depth": 2,
}


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, styles):
    root = tmp_path_factory.mktemp("cli")
    styles[0].save(root / "a.json")
    styles[1].save(root / "b.json")
    (root / "cfg.json").write_text(json.dumps(TINY))
    assert run("synth-data", "--style-a", root / "a.json", "--style-b", root / "b.json",
               "--counts", "8,4,6", "--d", D, "--out", root / "data", "--seed", 3) == 0
    assert run("train-classifier", "--train", root / "data/train.csv", "--val", root / "data/val.csv",
               "--config", root / "cfg.json", "--out", root / "clf.ckpt", "--history", root / "clf.jsonl") == 0
    assert run("train-sst", "--train", root / "data/train.csv", "--val", root / "data/val.csv",
               "--classifier", root / "clf.ckpt", "--config", root / "cfg.json",
               "--out", root / "g.ckpt", "--lambda-fp", 0.5) == 0
    return root


def test_synth_data_manifests_reload(workspace):
    for split, n in (("train", 8), ("val", 4), ("test", 6)):
        ds = load_manifest(workspace / "data" / f"{split}.csv", split)
        assert len(ds) == n and ds.d == D
        assert set(ds.labels) == {0, 1}


def test_synth_data_rerun_is_identical(workspace, tmp_path):
    assert run("synth-data", "--style-a", workspace / "a.json", "--style-b", workspace / "b.json",
               "--counts", "8,4,6", "--d", D, "--out", tmp_path, "--seed", 3) == 0
    for split in ("train", "val", "test"):
        for png in sorted((workspace / "data" / split).glob("*.png")):
            assert (tmp_path / split / png.name).read_bytes() == png.read_bytes()


def test_synth_data_missing_style_b(workspace, capsys):
    with pytest.raises(SystemExit) as exc:
        run("synth-data", "--style-a", workspace / "a.json", "--out", workspace / "x")
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_synth_data_odd_counts_is_runtime_error(workspace, tmp_path, capsys):
    code = run("synth-data", "--style-a", workspace / "a.json", "--style-b", workspace / "b.json",
               "--counts", "3,2,2", "--d", D, "--out", tmp_path)
    assert code == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and "Traceback" not in err[0]


def test_history_is_written(workspace):
    lines = (workspace / "clf.jsonl").read_text().splitlines()
    assert len(lines) == 1 and "val_auc" in json.loads(lines[0])


def test_transfer_with_generator(workspace, tmp_path):
    src = next((workspace / "data" / "test").glob("*.png"))
    assert run("transfer", "--generator", workspace / "g.ckpt", "--in", src, "--out", tmp_path / "out.png") == 0
    assert read_png(tmp_path / "out.png").shape == read_png(src).shape


def test_transfer_with_fitted_baseline(workspace, tmp_path):
    assert run("fit-baseline", "--method", "reinhard", "--data", workspace / "data/train.csv",
               "--out", tmp_path / "r.json") == 0
    src = next((workspace / "data" / "test").glob("*.png"))
    assert run("transfer", "--baseline", tmp_path / "r.json", "--in", src, "--out", tmp_path / "out.png") == 0
    assert read_png(tmp_path / "out.png").shape == (D, D, 3)


@pytest.mark.parametrize("method", ["reinhard", "macenko", "hs"])
def test_fit_baseline_methods(workspace, tmp_path, method):
    out = tmp_path / f"{method}.json"
    assert run("fit-baseline", "--method", method, "--data", workspace / "data/train.csv", "--out", out) == 0
    assert json.loads(out.read_text())["kind"] == method


def test_evaluate_without_classifier_is_usage_error(workspace):
    with pytest.raises(SystemExit) as exc:
        run("evaluate", "--data", workspace / "data/test.csv")
    assert exc.value.code == 2


def test_evaluate_json(workspace, capsys):
    assert run("evaluate", "--classifier", workspace / "clf.ckpt", "--data", workspace / "data/test.csv",
               "--generator", workspace / "g.ckpt", "--json") == 0
    [report] = json.loads(capsys.readouterr().out)
    assert report["method_name"] == "sst" and report["n_samples"] == 6
    assert 0.0 <= report["auc"] <= 1.0


def test_compare_five_methods(workspace, capsys):
    assert run("compare", "--classifier", workspace / "clf.ckpt", "--data", workspace / "data/test.csv",
               "--generator", workspace / "g.ckpt", "--target-data", workspace / "data/train.csv",
               "--methods", "sst,macenko,reinhard,hs,identity", "--json") == 0
    table = json.loads(capsys.readouterr().out)
    assert sorted(r["method_name"] for r in table) == ["hs", "identity", "macenko", "reinhard", "sst"]


def test_compare_text_table_has_five_rows(workspace, capsys):
    assert run("compare", "--classifier", workspace / "clf.ckpt", "--data", workspace / "data/test.csv",
               "--generator", workspace / "g.ckpt", "--target-data", workspace / "data/train.csv") == 0
    out = capsys.readouterr().out
    for name in ("sst", "macenko", "reinhard", "hs", "identity"):
        assert sum(line.split()[0] == name for line in out.splitlines() if line.strip()) == 1


def test_compare_unknown_method(workspace, capsys):
    code = run("compare", "--classifier", workspace / "clf.ckpt", "--data", workspace / "data/test.csv",
               "--methods", "identity,magic")
    assert code == 2
    assert "magic" in capsys.readouterr().err


def test_compare_baselines_need_target(workspace):
    assert run("compare", "--classifier", workspace / "clf.ckpt", "--data", workspace / "data/test.csv",
               "--methods", "reinhard") == 2


def test_missing_checkpoint_is_one_line_runtime_error(workspace, tmp_path, capsys):
    code = run("evaluate", "--classifier", tmp_path / "missing.ckpt", "--data", workspace / "data/test.csv")
    assert code == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and "checkpoint not found" in err[0]


def test_transfer_size_mismatch(workspace, tmp_path, capsys):
    write_png(np.full((32, 32, 3), 0.5), tmp_path / "big.png")
    code = run("transfer", "--generator", workspace / "g.ckpt", "--in", tmp_path / "big.png",
               "--out", tmp_path / "o.png")
    assert code == 1
    assert "expects" in capsys.readouterr().err


def test_config_precedence(workspace, tmp_path):
    args = cli.build_parser().parse_args([
        "train-classifier", "--train", "t", "--val", "v", "--out", "o",
        "--config", str(workspace / "cfg.json"), "--epochs", "7",
    ])
    cfg = cli._train_config(args)
    assert cfg.epochs == 7  # flag beats file
    assert cfg.batch_size == 8  # file beats default
    assert cfg.learning_rate == 2e-4  # default
