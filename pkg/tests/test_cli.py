import csv
import json

import pytest

import rnp.cli
from rnp.cli import main


@pytest.fixture
def run_root(tmp_path, monkeypatch):
    monkeypatch.setenv("RNP_RUN_DIR", str(tmp_path / "runs"))
    monkeypatch.chdir(tmp_path)
    return tmp_path


@pytest.fixture
def dataset(run_root):
    path = run_root / "sine.csv"
    assert main(["synth", "--kind", "sine-drift", "--steps", "160", "--seed", "1", "--out", str(path)]) == 0
    return path


TRAIN_FLAGS = ["--hidden", "8", "--latent", "4", "--context-len", "8", "--target-len", "8", "--seed", "3"]


@pytest.mark.parametrize("kind", ["sine-drift", "two-scale", "drives"])
def test_synth_is_byte_identical(run_root, kind):
    outs = []
    for name in ("a", "b"):
        path = run_root / f"{name}.csv"
        assert main(["synth", "--kind", kind, "--steps", "120", "--seed", "4", "--out", str(path)]) == 0
        outs.append((path.read_bytes(), path.with_suffix(".json").read_bytes()))
    assert outs[0] == outs[1]
    assert outs[0][0].startswith(b"step,x,y\n")
    assert json.loads(outs[0][1])["seed"] == 4


def test_synth_unknown_kind(run_root):
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--kind", "square", "--out", "x.csv"])
    assert exc.value.code == 1


def test_train_zero_epochs(run_root, dataset):
    assert main(["train", "--data", str(dataset), "--epochs", "0", *TRAIN_FLAGS, "--run-dir", "r"]) == 0
    assert (run_root / "r" / "metrics.jsonl").read_text() == ""
    manifest = json.loads((run_root / "r" / "manifest.json").read_text())
    assert manifest["seed"] == 3 and manifest["dataset"]["length"] == 160
    assert len(manifest["dataset"]["sha256"]) == 64
    assert {"command", "config", "version", "started_at"} <= set(manifest)


def test_train_default_run_dir_under_env_root(run_root, dataset, capsys):
    assert main(["train", "--data", str(dataset), "--epochs", "0", *TRAIN_FLAGS]) == 0
    out = capsys.readouterr().out.strip()
    assert out.startswith(str(run_root / "runs"))


def test_train_seed_recorded_when_omitted(run_root, dataset):
    flags = [f for f in TRAIN_FLAGS if f not in ("--seed", "3")]
    assert main(["train", "--data", str(dataset), "--epochs", "0", *flags, "--run-dir", "r"]) == 0
    manifest = json.loads((run_root / "r" / "manifest.json").read_text())
    assert isinstance(manifest["seed"], int)


def test_train_missing_dataset(run_root, capsys):
    assert main(["train", "--data", "absent.csv", "--epochs", "0"]) == 1
    assert "not found" in capsys.readouterr().err


def test_train_bad_config(run_root, dataset):
    assert main(["train", "--data", str(dataset), "--epochs", "0", "--hidden", "0"]) == 1


def test_manifest_written_before_training_and_left_alone(run_root, dataset, monkeypatch):
    seen = {}
    real_train = rnp.cli.train

    def spy(model, series, cfg, run_dir, **kw):
        seen["manifest"] = (run_dir / "manifest.json").read_bytes()
        return real_train(model, series, cfg, run_dir, **kw)

    monkeypatch.setattr(rnp.cli, "train", spy)
    assert main(["train", "--data", str(dataset), "--epochs", "2", *TRAIN_FLAGS, "--run-dir", "r"]) == 0
    assert (run_root / "r" / "manifest.json").read_bytes() == seen["manifest"]


@pytest.fixture
def trained(run_root, dataset):
    assert main(["train", "--data", str(dataset), "--epochs", "2", *TRAIN_FLAGS, "--run-dir", "r"]) == 0
    return run_root / "r" / "final.rnpc"


def test_eval_report_and_predictions(run_root, dataset, trained, capsys):
    rc = main(["eval", "--data", str(dataset), "--checkpoint", str(trained), "--samples", "40",
               "--baseline", "persistence", "--seed", "0"])
    assert rc == 0
    report = json.loads(capsys.readouterr().out)
    assert 0.0 <= report["picp"] <= 1.0
    assert report["baseline"] == "persistence" and report["normalized_mse"] > 0
    with (run_root / "r" / "predictions.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "mean", "p5", "p95", "target"]
    assert len(rows) - 1 == report["n_steps"] == 80
    assert all(float(r[2]) <= float(r[3]) for r in rows[1:])


def test_eval_is_seeded(run_root, dataset, trained, capsys):
    args = ["eval", "--data", str(dataset), "--checkpoint", str(trained), "--samples", "30", "--seed", "5"]
    main(args)
    first = capsys.readouterr().out
    main(args)
    assert capsys.readouterr().out == first


def test_eval_dimension_mismatch(run_root, trained):
    wide = run_root / "wide.csv"
    wide.write_text("a,b,y\n" + "".join(f"{i},{i},{i % 7}\n" for i in range(100)))
    rc = main(["eval", "--data", str(wide), "--input-columns", "a,b", "--checkpoint", str(trained)])
    assert rc == 1


def test_eval_missing_checkpoint(run_root, dataset):
    assert main(["eval", "--data", str(dataset), "--checkpoint", "none.rnpc"]) == 1


def test_eval_corrupt_checkpoint(run_root, dataset):
    bad = run_root / "bad.rnpc"
    bad.write_bytes(b"NOPE" + b"\0" * 20)
    assert main(["eval", "--data", str(dataset), "--checkpoint", str(bad)]) == 1


def test_gradcheck_pass(capsys):
    assert main(["gradcheck"]) == 0
    assert capsys.readouterr().out.startswith("PASS rel_err<1e-3")


def test_gradcheck_injected_fault(capsys):
    assert main(["gradcheck", "--inject-grad-fault"]) == 3
    assert capsys.readouterr().out.startswith("FAIL")


def test_gradcheck_flags_in_report(capsys):
    assert main(["gradcheck", "--eps", "1e-6", "--tol", "1e-2"]) == 0
    out = capsys.readouterr().out
    assert "rel_err<1e-2" in out and "eps 1e-6" in out
