import dataclasses
import json
import math

import numpy as np
import pytest
import torch

from mvgfdr import gradcheck
from mvgfdr.backbone import CheckpointVersionError, MVGFDR, ModelConfig, read_checkpoint
from mvgfdr.metrics import validate_report_dict
from mvgfdr.training import (
    LOG_COLUMNS,
    NonFiniteLossError,
    TrainConfig,
    evaluate,
    read_sweep_csv,
    resolve_param,
    sweep,
    train,
)

TINY = ModelConfig(image_size=32, channels=(8, 8, 8, 8), heads=2, num_anchors=8, views=4, classes=5,
                   reconstructor="gcr", seed=0)


def tcfg(**kw):
    base = dict(model=TINY, epochs=1, batch_size=4, lr=1e-3)
    return TrainConfig(**{**base, **kw})


class Subset:
    def __init__(self, data, idx):
        self.data, self.idx = data, list(idx)

    def __len__(self):
        return len(self.idx)

    def __getitem__(self, i):
        return self.data[self.idx[i]]

    def batch(self, indices):
        return self.data.batch([self.idx[int(i)] for i in indices])


def test_smoke_one_epoch_writes_loadable_checkpoint(tiny_data, tmp_path):
    res = train(tcfg(), Subset(tiny_data, range(8)), out_dir=tmp_path)
    model = MVGFDR.load(tmp_path / "checkpoint.pt")
    assert isinstance(model, MVGFDR)
    lines = (tmp_path / "train.log").read_text().splitlines()
    assert lines[0].split("\t") == list(LOG_COLUMNS)
    assert len(lines) == 2 and lines[1].split("\t")[0] == "1"
    assert math.isfinite(res.history[0]["total_loss"])


def test_log_is_tab_separated_per_epoch(tiny_data, tmp_path):
    train(tcfg(epochs=3, eval_every=2), tiny_data, tiny_data, out_dir=tmp_path)
    rows = [line.split("\t") for line in (tmp_path / "train.log").read_text().splitlines()[1:]]
    assert [r[0] for r in rows] == ["1", "2", "3"]
    assert all(len(r) == 6 for r in rows)
    assert rows[0][4] == "nan" and rows[1][4] != "nan"


def test_identical_seeds_identical_losses(tiny_data):
    a = train(tcfg(epochs=2), tiny_data).history
    b = train(tcfg(epochs=2), tiny_data).history
    assert abs(a[-1]["total_loss"] - b[-1]["total_loss"]) <= 1e-9
    c = train(tcfg(epochs=2, seed=1), tiny_data).history
    assert c[-1]["total_loss"] != a[-1]["total_loss"]


def test_resume_matches_uninterrupted(tiny_data, tmp_path):
    full = train(tcfg(epochs=3), tiny_data, out_dir=tmp_path / "full")
    train(tcfg(epochs=2), tiny_data, out_dir=tmp_path / "part")
    resumed = train(tcfg(epochs=3), tiny_data, out_dir=tmp_path / "part",
                    resume=tmp_path / "part" / "checkpoint.pt")
    assert [r["total_loss"] for r in resumed.history] == [r["total_loss"] for r in full.history]
    for (k, v), w in zip(full.model.state_dict().items(), resumed.model.state_dict().values()):
        assert torch.equal(v, w), k
    assert len((tmp_path / "part" / "train.log").read_text().splitlines()) == 4


def test_training_checkpoint_extras(tiny_data, tmp_path):
    train(tcfg(epochs=2), tiny_data, out_dir=tmp_path)
    extra = read_checkpoint(tmp_path / "checkpoint.pt")["extra"]
    assert extra["epoch"] == 2 and extra["step"] == 6
    assert TrainConfig.from_dict(extra["train_config"]) == tcfg(epochs=2)


def test_evaluate_is_pure(tiny_data, tmp_path):
    res = train(tcfg(), tiny_data, out_dir=tmp_path)
    model = res.model.train()
    before = {k: v.clone() for k, v in model.state_dict().items()}
    r1 = evaluate(model, tiny_data)
    r2 = evaluate(tmp_path / "checkpoint.pt", tiny_data)
    assert model.training
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())
    assert r1.to_dict() == r2.to_dict()
    validate_report_dict(json.loads(r1.to_json()))


def test_evaluate_errors(tiny_data, tmp_path):
    model = MVGFDR(dataclasses.replace(TINY, views=2))
    with pytest.raises(CheckpointVersionError):
        evaluate(model, tiny_data)
    with pytest.raises(ValueError, match="empty"):
        evaluate(MVGFDR(TINY), Subset(tiny_data, []))


def test_nonfinite_loss_aborts_with_dump(tiny_data, tmp_path, monkeypatch):
    import mvgfdr.training as T

    monkeypatch.setattr(T, "total_loss", lambda cls, recon: cls * float("nan"))
    with pytest.raises(NonFiniteLossError, match="batch 0"):
        train(tcfg(), tiny_data, out_dir=tmp_path)
    dump = json.loads((tmp_path / "nonfinite_batch.json").read_text())
    assert dump["batch"] == 0 and len(dump["sample_ids"]) == 4


@pytest.mark.parametrize("bad", [dict(epochs=0), dict(lr=0.0), dict(optimizer="sgd"), dict(batch_size=0)])
def test_train_config_validation(bad):
    with pytest.raises(ValueError):
        tcfg(**bad)


def test_training_reduces_loss(tiny_data):
    hist = train(tcfg(epochs=8), tiny_data).history
    assert hist[-1]["cls_loss"] < hist[0]["cls_loss"]


def test_sweep_grid(tiny_data, tmp_path):
    grid = {"eta": [0.5, 0.25], "alpha": [0.3, 0.1]}
    out = tmp_path / "sweep.csv"
    rows = sweep(grid, tcfg(), tiny_data, tiny_data, out_csv=out)
    assert len(rows) == 4
    assert [r[:2] for r in rows] == sorted(r[:2] for r in rows)
    header, read = read_sweep_csv(out)
    assert header == ["eta", "alpha", "acc"] and read == rows
    first = out.read_bytes()
    sweep(grid, tcfg(), tiny_data, tiny_data, out_csv=out)
    assert out.read_bytes() == first


def test_sweep_param_names():
    assert resolve_param("M") == "num_anchors" and resolve_param("k_theta") == "k_theta"
    with pytest.raises(ValueError):
        resolve_param("nope")
    with pytest.raises(ValueError, match="two"):
        sweep({"eta": [0.5]}, tcfg(), None, None)


def test_gradcheck_linear_exact():
    assert gradcheck.grad_check("linear") < 1e-9


@pytest.mark.parametrize("component,tol", [("mvgi", 1e-4), ("fusion", 1e-4)])
def test_gradcheck_components(component, tol):
    assert gradcheck.grad_check(component, seed=1) < tol


def test_gradcheck_detects_wrong_gradient():
    x = torch.randn(4, dtype=torch.float64, requires_grad=True)

    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, t):
            return t.pow(3)

        @staticmethod
        def backward(ctx, g):
            return g  # true derivative is 3 t^2

    assert gradcheck.check(lambda: Bad.apply(x).sum(), [x]) > 0.1


def test_gradcheck_unknown_component():
    with pytest.raises(ValueError):
        gradcheck.grad_check("backbone")


def test_relative_error_floor():
    a, n = [torch.tensor([1e-9])], [torch.tensor([0.0])]
    assert gradcheck.max_relative_error(a, n) == pytest.approx(1e-3)
    assert gradcheck.max_relative_error([torch.tensor([2.0])], [torch.tensor([1.0])]) == 0.5
    assert np.isfinite(gradcheck.max_relative_error([torch.zeros(2)], [torch.zeros(2)]))
