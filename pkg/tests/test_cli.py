import json
import subprocess
import sys

import pytest

from mvgfdr.cli import main, resolve_config, ValidationError
from mvgfdr.training import write_sweep_csv

TINY_CFG = """\
[model]
image_size = 32
channels = 8, 8, 8, 8
heads = 2
num_anchors = 8
reconstructor = gcr

[train]
epochs = 1
batch_size = 4
lr = 1e-3

[data]
train_manifest = {manifest}
"""


@pytest.fixture
def runs(tmp_path, monkeypatch):
    root = tmp_path / "runs"
    monkeypatch.setenv("MVGF_RUN_DIR", str(root))
    return root


@pytest.fixture
def dataset(tmp_path):
    out = tmp_path / "d"
    assert main(["gen-data", "--n", "8", "--seed", "7", "--size", "32", "--out", str(out)]) == 0
    return out


def config(tmp_path, dataset):
    path = tmp_path / "c.cfg"
    path.write_text(TINY_CFG.format(manifest=dataset / "manifest.csv"))
    return path


def test_gen_data_then_train_then_eval(tmp_path, dataset, runs, capsys):
    cfg = config(tmp_path, dataset)
    assert main(["train", "--config", str(cfg), "--run-name", "r1"]) == 0
    run = runs / "r1"
    assert {"checkpoint.pt", "train.log", "config.json", "run.log"} <= {p.name for p in run.iterdir()}
    echoed = json.loads((run / "config.json").read_text())
    assert echoed["model"]["num_anchors"] == 8 and echoed["train"]["epochs"] == 1
    assert "resolved config" in (run / "run.log").read_text()
    capsys.readouterr()
    out = tmp_path / "metrics.json"
    assert main(["eval", "--checkpoint", str(run / "checkpoint.pt"),
                 "--manifest", str(dataset / "manifest.csv"), "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert 0.0 <= report["acc"] <= 1.0 and len(report["confusion"]) == 5


def test_default_run_name_has_timestamp_and_seed(tmp_path, dataset, runs):
    assert main(["train", "--config", str(config(tmp_path, dataset)), "seed=3"]) == 0
    (run,) = runs.iterdir()
    assert run.name.endswith("_seed3") and run.name[:8].isdigit()


def test_overrides_beat_file(tmp_path, dataset):
    resolved = resolve_config(str(config(tmp_path, dataset)), ["eta=0.25", "train.epochs=2"])
    assert resolved["model"]["eta"] == 0.25 and resolved["train"]["epochs"] == 2
    assert resolved["model"]["channels"] == (8, 8, 8, 8)


def test_unknown_override_key_exits_1(tmp_path, dataset, runs, capsys):
    assert main(["train", "--config", str(config(tmp_path, dataset)), "not_a_key=3"]) == 1
    assert "not_a_key" in capsys.readouterr().err
    assert not runs.exists()


def test_unknown_file_key_and_section(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[model]\nwidth = 3\n")
    with pytest.raises(ValidationError, match="width"):
        resolve_config(str(bad), [])
    bad.write_text("[optim]\nlr = 3\n")
    with pytest.raises(ValidationError, match="optim"):
        resolve_config(str(bad), [])


def test_invalid_value_exits_1(tmp_path, dataset, runs):
    assert main(["train", "--config", str(config(tmp_path, dataset)), "k_theta=2"]) == 1
    assert main(["train", "--config", str(config(tmp_path, dataset)), "epochs=many"]) == 1


def test_rerun_refuses_without_force(tmp_path, dataset, runs, capsys):
    cfg = str(config(tmp_path, dataset))
    assert main(["train", "--config", cfg, "--run-name", "same"]) == 0
    assert main(["train", "--config", cfg, "--run-name", "same"]) == 1
    assert "--force" in capsys.readouterr().err
    assert main(["train", "--config", cfg, "--run-name", "same", "--force"]) == 0


def test_gen_data_refuses_overwrite(dataset):
    assert main(["gen-data", "--n", "8", "--out", str(dataset)]) == 1
    assert main(["gen-data", "--n", "8", "--size", "32", "--out", str(dataset), "--force"]) == 0


def test_eval_errors(tmp_path, dataset):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.pt"),
                 "--manifest", str(dataset / "manifest.csv")]) == 1
    junk = tmp_path / "junk.pt"
    junk.write_bytes(b"garbage")
    assert main(["eval", "--checkpoint", str(junk), "--manifest", str(dataset / "manifest.csv")]) == 2


def test_missing_manifest_exits_1(tmp_path, runs):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(TINY_CFG.format(manifest=tmp_path / "nope.csv"))
    assert main(["train", "--config", str(cfg)]) == 1


def test_sweep_writes_csv(tmp_path, dataset, runs):
    cfg = str(config(tmp_path, dataset))
    assert main(["sweep", "--config", cfg, "--run-name", "sw", "--grid", "eta=0.25,0.5", "alpha=0.1,0.3"]) == 0
    lines = (runs / "sw" / "sweep.csv").read_text().splitlines()
    assert lines[0] == "eta,alpha,acc" and len(lines) == 5
    assert main(["sweep", "--config", cfg, "--grid", "eta=0.5", "bogus=1"]) == 1


def test_plot_heatmap_and_surface(tmp_path):
    a = tmp_path / "a.csv"
    write_sweep_csv(a, ["eta", "alpha"], [(0.25, 0.1, 0.4), (0.25, 0.3, 0.5), (0.5, 0.1, 0.6), (0.5, 0.3, 0.7)])
    assert main(["plot", "--sweep", str(a), "--out", str(tmp_path / "fa")]) == 0
    assert (tmp_path / "fa" / "heatmap_eta_alpha.png").stat().st_size > 0
    b = tmp_path / "b.csv"
    write_sweep_csv(b, ["M", "k_theta"], [(16, 0.5, 0.4), (16, 0.75, 0.5), (32, 0.5, 0.6), (32, 0.75, 0.7)])
    assert main(["plot", "--sweep", str(b), "--out", str(tmp_path / "fb")]) == 0
    names = {p.name for p in (tmp_path / "fb").iterdir()}
    assert any("surface" in n for n in names) and any("contour" in n for n in names)
    assert main(["plot", "--sweep", str(tmp_path / "missing.csv"), "--out", str(tmp_path)]) == 1


def test_gradcheck_subcommand(capsys):
    assert main(["gradcheck", "--component", "fusion"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_bad_arguments_exit_1():
    assert main(["no-such-command"]) == 1
    assert main(["gen-data"]) == 1


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "mvgfdr.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("gen-data", "train", "eval", "sweep", "gradcheck", "plot"):
        assert cmd in out.stdout
