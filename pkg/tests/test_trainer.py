# (C) Copyright 2024- ssmpeft developers.
#
# This software is licensed under the terms of the Apache Licence Version 2.0
# which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
#

import json
import math
import os
import time

import numpy as np
import pytest

from ssmpeft import adapters, trainer
from ssmpeft.archs import get_arch
from ssmpeft.config import ExperimentConfig
from ssmpeft.core.tensor import Tensor
from ssmpeft.errors import ContractError, NumericError, TrainingAborted
from ssmpeft.ssm import MambaModel
from ssmpeft.tasks import TaskGenerator, TaskSpec
from ssmpeft.trainer import RunMetrics, TrainConfig

ETC_PATH = os.path.join(os.path.dirname(__file__), os.pardir, "ssmpeft", "etc")


def small_config(**kwargs):
    conf = dict(lr=0.05, epochs=2, batch_size=8, n_train=16, n_val=8, probe_size=8, early_stopping=False)
    conf.update(kwargs)
    return TrainConfig(**conf)


def small_data(seed=0):
    gen = TaskGenerator(TaskSpec("selective_copy", seq_len=8, vocab=12, n_marked=2))
    return gen.dataset(16, seed), gen.dataset(8, seed + 1)


def small_experiment(tmp_path, method="state_offset_h", **kwargs):
    data = {
        "name": "tiny",
        "seed": 3,
        "arch": "toy-tiny",
        "pretrain_task": {"kind": "selective_copy", "seq_len": 8, "vocab": 12, "n_marked": 2, "marker": 2},
        "task": {"kind": "selective_copy", "seq_len": 8, "vocab": 12, "n_marked": 2, "marker": 3},
        "adapter": adapters.AdapterSpec.with_defaults(method).to_dict(),
        "pretrain": {"lr": 0.01, "epochs": 1, "batch_size": 8, "n_train": 16, "n_val": 8},
        "train": {"lr": 0.05, "epochs": 2, "batch_size": 8, "n_train": 16, "n_val": 8},
        "output_dir": str(tmp_path),
    }
    data.update(kwargs)
    return ExperimentConfig.from_dict(data)


def test_train_config():
    c = TrainConfig()
    assert c.lr == 1e-3
    assert c.betas == (0.9, 0.999)
    assert c.schedule == "linear"
    assert len(c.lr_grid) == 15
    assert max(c.lr_grid) == 0.4
    assert min(c.lr_grid) == 1e-5

    c2 = c.replace(lr=0.1, epochs=1)
    assert c2.lr == 0.1
    assert c2.epochs == 1
    assert c.lr == 1e-3
    assert TrainConfig.from_dict(c2.to_dict()).to_dict() == c2.to_dict()


@pytest.mark.parametrize(
    "kwargs",
    [
        {"lr": 0.0},
        {"lr": -1.0},
        {"epochs": 0},
        {"batch_size": 2.5},
        {"schedule": "cosine"},
        {"weight_decay": -0.1},
        {"momentum": 0.9},
    ],
)
def test_train_config_errors(kwargs):
    with pytest.raises(ContractError):
        TrainConfig(**kwargs)


def test_lr_at():
    assert trainer.lr_at(0, 10, 1.0) == 1.0
    assert trainer.lr_at(5, 10, 1.0) == 0.5
    assert trainer.lr_at(10, 10, 1.0) == 0.0
    assert trainer.lr_at(7, 10, 0.3, "constant") == 0.3

    with pytest.raises(ContractError):
        trainer.lr_at(11, 10, 1.0)
    with pytest.raises(ContractError):
        trainer.lr_at(0, 0, 1.0)


def test_adamw_step():
    # the first bias-corrected step moves every entry by lr * sign(g)
    p = {"w": np.array([1.0, -2.0])}
    state = trainer.new_adam_state()
    trainer.adamw_step(p, {"w": np.array([0.5, -3.0])}, state, 0.1)
    assert state["t"] == 1
    np.testing.assert_allclose(p["w"], [0.9, -1.9], atol=1e-7)

    # decoupled weight decay only on flagged arrays
    p = {"w": np.array([1.0]), "b": np.array([1.0])}
    g = {"w": np.array([0.5]), "b": np.array([0.5])}
    trainer.adamw_step(p, g, trainer.new_adam_state(), 0.1, weight_decay=0.1, decay={"w": True, "b": False})
    np.testing.assert_allclose(p["w"], [0.89], atol=1e-7)
    np.testing.assert_allclose(p["b"], [0.9], atol=1e-7)

    # arrays without a gradient are left alone
    p = {"w": np.array([1.0]), "b": np.array([1.0])}
    trainer.adamw_step(p, {"w": np.array([1.0]), "b": None}, trainer.new_adam_state(), 0.1)
    assert p["b"][0] == 1.0


def test_adamw_step_non_finite():
    p = {"w": np.array([1.0, 2.0])}
    state = trainer.new_adam_state()
    with pytest.raises(NumericError) as e:
        trainer.adamw_step(p, {"w": np.array([np.nan, 1.0])}, state, 0.1)
    assert e.value.name == "w"
    assert state["t"] == 0
    assert list(p["w"]) == [1.0, 2.0]


def test_sequence_loss():
    logits = Tensor(np.zeros((2, 3, 4)))
    targets = np.array([[0, 1, 2], [3, 0, 1]])
    mask = np.array([[False, False, True], [False, True, True]])
    assert trainer.sequence_loss(logits, targets, mask).item() == pytest.approx(math.log(4))

    # a confident correct prediction costs almost nothing
    data = np.zeros((1, 2, 4))
    data[0, 1, 2] = 50.0
    loss = trainer.sequence_loss(Tensor(data), np.array([[0, 2]]), np.array([[False, True]]))
    assert loss.item() < 1e-12

    with pytest.raises(ContractError):
        trainer.sequence_loss(logits, targets, np.zeros((2, 3), dtype=bool))


def test_masked_accuracy():
    logits = np.zeros((1, 3, 4))
    logits[0, 0, 1] = 1.0
    logits[0, 1, 2] = 1.0
    logits[0, 2, 3] = 1.0
    targets = np.array([[1, 2, 0]])
    assert trainer.masked_accuracy(logits, targets, np.array([[True, True, True]])) == pytest.approx(2 / 3)
    assert trainer.masked_accuracy(logits, targets, np.array([[True, True, False]])) == 1.0


def test_run_metrics(tmp_path):
    m = RunMetrics("state_offset_h", {"method": "state_offset_h"}, 0.01, 2, 10, 1000)
    m.train_loss = [2.0, 1.5, 1.2]
    m.val_loss = [1.9, 1.4, 1.6]
    m.val_accuracy = [0.2, 0.5, 0.4]
    m.best_epoch = 1
    m.wall_time = 12.5
    assert m.params_pct == 1.0
    assert m.epochs_run == 3
    assert m.best_val_accuracy == 0.5
    assert m.best_val_loss == 1.4

    d = m.to_dict()
    assert "wall_time" not in d
    assert m.to_dict(include_timing=True)["wall_time"] == 12.5

    path = os.path.join(tmp_path, "metrics.json")
    m.save(path)
    r = RunMetrics.load(path)
    assert r.to_dict() == d

    assert RunMetrics().best_val_accuracy is None


def test_grid_search():
    calls = []

    def fake_train(adapted, train_set, val_set, cfg):
        calls.append((cfg.lr, cfg.epochs, len(train_set), len(val_set)))
        m = RunMetrics(lr=cfg.lr)
        if cfg.lr > 0.5:
            m.train_loss.append(math.nan)
        elif cfg.lr > 0.3:
            raise NumericError("diverged")
        else:
            m.train_loss.append((cfg.lr - 0.1) ** 2)
        return m

    cfg = small_config(probe_size=3)
    grid = [1.0, 0.4, 0.2, 0.1, 0.01]
    lr, table = trainer.grid_search(lambda: None, list(range(10)), cfg, grid=grid, train_fn=fake_train)
    assert lr == 0.1
    assert list(table["lr"]) == [1.0, 0.4, 0.2, 0.1, 0.01]
    assert table["probe_loss"].isna().sum() == 2
    assert all(c[1:] == (1, 3, 0) for c in calls)

    with pytest.raises(NumericError):
        trainer.grid_search(lambda: None, list(range(10)), cfg, grid=[1.0, 0.4], train_fn=fake_train)

    with pytest.raises(ContractError):
        trainer.grid_search(lambda: None, list(range(10)), cfg, grid=[], train_fn=fake_train)


def test_grid_search_skips_diverged_training():
    def factory():
        model = MambaModel.build(get_arch("toy-tiny"), seed=0)
        return adapters.apply_adapter(model, adapters.AdapterSpec("full_all"))

    train_set, _ = small_data()
    lr, table = trainer.grid_search(factory, train_set, small_config(), grid=[1e6, 1e-3])
    assert lr == 1e-3
    assert list(table["lr"]) == [1e6, 1e-3]
    assert np.isfinite(table["probe_loss"].iloc[1])


def test_train():
    model = MambaModel.build(get_arch("toy-tiny"), seed=0)
    train_set, val_set = small_data()

    adapted = adapters.apply_adapter(model, adapters.AdapterSpec("state_offset_h"))
    m = trainer.train(adapted, train_set, val_set, small_config())
    assert m.epochs_run == 2
    assert len(m.val_loss) == 2
    assert m.best_epoch in (0, 1)
    assert m.best_val_accuracy == max(m.val_accuracy)
    assert m.trainable_params == 2 * 8 * 4
    assert any(np.any(v.data != 0) for v in adapted.trainable_parameters().values())

    # the backbone is not touched
    for k, v in adapted.frozen_parameters().items():
        assert np.array_equal(v.data, dict(model.named_arrays())[k].data)

    # restoring the best epoch reproduces its validation loss
    loss, acc = trainer.evaluate(adapted, val_set, 8)
    assert loss == pytest.approx(m.best_val_loss, rel=1e-12)
    assert acc == m.best_val_accuracy


def test_train_deterministic():
    model = MambaModel.build(get_arch("toy-tiny"), seed=0)
    train_set, val_set = small_data()
    r = []
    for _ in range(2):
        adapted = adapters.apply_adapter(model, adapters.AdapterSpec("state_offset_y"), seed=1)
        r.append(json.dumps(trainer.train(adapted, train_set, val_set, small_config()).to_dict()))
    assert r[0] == r[1]


def test_train_metrics_stream(tmp_path):
    model = MambaModel.build(get_arch("toy-tiny"), seed=0)
    train_set, val_set = small_data()
    adapted = adapters.apply_adapter(model, adapters.AdapterSpec("initial_state"))
    path = os.path.join(tmp_path, "metrics.jsonl")
    trainer.train(adapted, train_set, val_set, small_config(epochs=3), metrics_path=path)
    with open(path) as f:
        records = [json.loads(line) for line in f]
    assert [r["epoch"] for r in records] == [0, 1, 2]
    assert set(records[0]) == {"epoch", "train_loss", "val_loss", "val_accuracy"}


def test_train_early_stopping():
    model = MambaModel.build(get_arch("toy-tiny"), seed=0)
    train_set, val_set = small_data()
    adapted = adapters.apply_adapter(model, adapters.AdapterSpec("state_offset_h"))
    # a huge constant rate makes the validation loss worse after the first epoch
    cfg = small_config(lr=1.0, epochs=6, early_stopping=True, patience=1, schedule="constant")
    m = trainer.train(adapted, train_set, val_set, cfg)
    if m.stopped_early:
        assert m.epochs_run < 6
    else:
        assert m.epochs_run == 6


def test_train_frozen():
    model = MambaModel.build(get_arch("toy-tiny"), seed=0)
    train_set, val_set = small_data()
    adapted = adapters.apply_adapter(model, adapters.AdapterSpec("frozen"))
    m = trainer.train(adapted, train_set, val_set, small_config())
    assert m.trainable_params == 0
    assert m.train_loss[0] == pytest.approx(m.train_loss[1])


def test_train_aborted():
    model = MambaModel.build(get_arch("toy-tiny"), seed=0)
    train_set, val_set = small_data()
    adapted = adapters.apply_adapter(model, adapters.AdapterSpec("state_offset_y"))
    adapted.arrays["layers.0.y_prime"].data[...] = np.nan
    with pytest.raises(TrainingAborted) as e:
        trainer.train(adapted, train_set, val_set, small_config())
    assert e.value.epoch == 0
    assert "layers.0.y_prime" in e.value.snapshot
    assert np.array_equal(adapted.arrays["layers.0.y_prime"].data, e.value.snapshot["layers.0.y_prime"], equal_nan=True)

    # a diverged dt bias makes delta infinite inside the scan
    adapted = adapters.apply_adapter(model, adapters.AdapterSpec("full_s6"))
    adapted.trainable_parameters()["layers.0.b_dt"].data[...] = np.inf
    with pytest.raises(TrainingAborted) as e:
        trainer.train(adapted, train_set, val_set, small_config())
    assert e.value.epoch == 0

    with pytest.raises(ContractError):
        trainer.train(adapted, [], val_set, small_config())


def test_evaluate_empty():
    model = MambaModel.build(get_arch("toy-tiny"), seed=0)
    adapted = adapters.apply_adapter(model, adapters.AdapterSpec("frozen"))
    assert trainer.evaluate(adapted, []) == (None, None)


@pytest.mark.parametrize("method", ["state_offset_h", "sdt", "prompt_tuning"])
def test_run_experiment(tmp_path, method):
    exp = small_experiment(tmp_path, method)
    m = trainer.run_experiment(exp)
    assert m.method == method
    for f in ["backbone.ckpt", "adapter.ckpt", "metrics.json", "metrics.jsonl"]:
        assert os.path.exists(os.path.join(tmp_path, f)), f

    with open(os.path.join(tmp_path, "metrics.json")) as f:
        assert json.load(f) == m.to_dict()

    adapted = trainer.load_adapted(os.path.join(tmp_path, "adapter.ckpt"))
    assert adapted.spec == exp.adapter
    _, val_set = small_data()
    tokens, _, _ = TaskGenerator.stack(val_set)
    assert adapted.forward(tokens).shape == (8, 8, 12)


def test_run_experiment_deterministic(tmp_path):
    out = []
    for i in range(2):
        d = os.path.join(tmp_path, str(i))
        trainer.run_experiment(small_experiment(d))
        with open(os.path.join(d, "metrics.json"), "rb") as f:
            out.append(f.read())
    assert out[0] == out[1]


def test_run_experiment_backbone_checkpoint(tmp_path):
    first = os.path.join(tmp_path, "first")
    trainer.run_experiment(small_experiment(first))
    second = os.path.join(tmp_path, "second")
    exp = small_experiment(second, backbone_checkpoint=os.path.join(first, "backbone.ckpt"))
    trainer.run_experiment(exp)
    # no pretraining when a backbone is given
    assert not os.path.exists(os.path.join(second, "backbone.ckpt"))
    assert os.path.exists(os.path.join(second, "adapter.ckpt"))


@pytest.mark.skipif(not os.environ.get("SSMPEFT_SLOW"), reason="set SSMPEFT_SLOW to run the toy adaptation")
@pytest.mark.slow
def test_toy_adaptation(tmp_path):
    path = os.path.join(ETC_PATH, "experiments", "toy_adaptation.json")
    with open(path) as f:
        data = json.load(f)
    methods = ["full_s6", "state_offset_h", "state_offset_y", "initial_state", "prompt_tuning"]
    acc = {m: [] for m in methods}
    t0 = time.perf_counter()
    for seed in range(3):
        # the backbone depends on the seed only, pretrain it once
        backbone = None
        for method in methods:
            conf = dict(data)
            if backbone:
                conf["backbone_checkpoint"] = backbone
            out = os.path.join(tmp_path, f"{method}_{seed}")
            exp = ExperimentConfig.from_dict(conf, {"method": method, "seed": seed, "output_dir": out})
            acc[method].append(trainer.run_experiment(exp).best_val_accuracy)
            backbone = backbone or os.path.join(out, "backbone.ckpt")
    elapsed = time.perf_counter() - t0
    acc = {m: np.mean(v) for m, v in acc.items()}
    print(f"toy adaptation mean accuracy {acc} in {elapsed:.0f}s")
    assert elapsed < 15 * 60
    assert acc["state_offset_h"] >= acc["prompt_tuning"] + 0.03
    assert acc["state_offset_h"] >= acc["full_s6"] - 0.05
