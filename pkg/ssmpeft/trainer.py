# (C) Copyright 2024- ssmpeft developers.
#
# This software is licensed under the terms of the Apache Licence Version 2.0
# which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
#

import copy
import json
import logging
import math
import os
import time

import numpy as np
import pandas as pd
import yaml

from . import adapters
from .checkpoint import load_checkpoint, save_checkpoint
from .core import tensor as tn
from .core.tensor import Tape, Tensor
from .core.utils import derive_seed, make_rng
from .errors import ContractError, NumericError, TrainingAborted
from .ssm import MambaModel
from .tasks import TaskGenerator, domain_shift

LOG = logging.getLogger(__name__)

ETC_PATH = os.path.join(os.path.dirname(__file__), "etc")

SCHEDULES = ["linear", "constant"]


def train_defaults():
    with open(os.path.join(ETC_PATH, "train_defaults.yaml")) as f:
        return yaml.safe_load(f)


class TrainConfig:
    KEYS = [
        "lr",
        "epochs",
        "batch_size",
        "schedule",
        "early_stopping",
        "patience",
        "weight_decay",
        "betas",
        "eps",
        "seed",
        "n_train",
        "n_val",
        "probe_size",
        "sdt_warmup_batches",
        "lr_grid",
    ]

    def __init__(self, **kwargs):
        unknown = [k for k in kwargs if k not in self.KEYS]
        if unknown:
            raise ContractError(f"TrainConfig: unknown keys {unknown}")
        conf = train_defaults()
        conf.update(kwargs)
        for k in self.KEYS:
            setattr(self, k, conf.get(k, None))
        self.betas = tuple(self.betas)
        self.lr_grid = [] if self.lr_grid is None else list(self.lr_grid)
        if not self.lr > 0:
            raise ContractError(f"TrainConfig: lr must be > 0 (got {self.lr})")
        for k in ["epochs", "batch_size", "patience", "n_train", "probe_size"]:
            v = getattr(self, k)
            if not isinstance(v, int) or v < 1:
                raise ContractError(f"TrainConfig: {k} must be a positive int (got {v!r})")
        if self.schedule not in SCHEDULES:
            raise ContractError(f"TrainConfig: schedule must be one of {SCHEDULES} (got {self.schedule})")
        if self.weight_decay < 0:
            raise ContractError(f"TrainConfig: weight_decay must be >= 0 (got {self.weight_decay})")

    def replace(self, **kwargs):
        d = self.to_dict()
        d.update(kwargs)
        return TrainConfig(**d)

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.KEYS}
        d["betas"] = list(self.betas)
        return d

    @staticmethod
    def from_dict(d):
        return TrainConfig(**d)


class RunMetrics:
    """Per-epoch history and summary of one training run"""

    def __init__(self, method="", spec=None, lr=0.0, seed=0, trainable_params=0, total_params=0):
        self.method = method
        self.spec = {} if spec is None else spec
        self.lr = lr
        self.seed = seed
        self.trainable_params = trainable_params
        self.total_params = total_params
        self.train_loss = []
        self.val_loss = []
        self.val_accuracy = []
        self.best_epoch = None
        self.stopped_early = False
        self.wall_time = 0.0

    @property
    def params_pct(self):
        return 100.0 * self.trainable_params / self.total_params if self.total_params else 0.0

    @property
    def epochs_run(self):
        return len(self.train_loss)

    @property
    def best_val_accuracy(self):
        if self.best_epoch is None or not self.val_accuracy:
            return None
        return self.val_accuracy[self.best_epoch]

    @property
    def best_val_loss(self):
        if self.best_epoch is None or not self.val_loss:
            return None
        return self.val_loss[self.best_epoch]

    def to_dict(self, include_timing=False):
        d = {
            "method": self.method,
            "spec": self.spec,
            "lr": self.lr,
            "seed": self.seed,
            "trainable_params": self.trainable_params,
            "total_params": self.total_params,
            "params_pct": self.params_pct,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "val_accuracy": self.val_accuracy,
            "best_epoch": self.best_epoch,
            "best_val_accuracy": self.best_val_accuracy,
            "best_val_loss": self.best_val_loss,
            "epochs_run": self.epochs_run,
            "stopped_early": self.stopped_early,
        }
        if include_timing:
            d["wall_time"] = self.wall_time
        return d

    @staticmethod
    def from_dict(d):
        r = RunMetrics(d["method"], d.get("spec", {}), d["lr"], d.get("seed", 0))
        r.trainable_params = d["trainable_params"]
        r.total_params = d["total_params"]
        r.train_loss = list(d["train_loss"])
        r.val_loss = list(d["val_loss"])
        r.val_accuracy = list(d["val_accuracy"])
        r.best_epoch = d["best_epoch"]
        r.stopped_early = d.get("stopped_early", False)
        r.wall_time = d.get("wall_time", 0.0)
        return r

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, sort_keys=True, indent=2)

    @staticmethod
    def load(path):
        with open(path) as f:
            return RunMetrics.from_dict(json.load(f))


def lr_at(step, total_steps, base_lr, schedule="linear"):
    if total_steps < 1 or step < 0 or step > total_steps:
        raise ContractError(f"lr_at(): need 0 <= step <= total_steps, total_steps >= 1 (got {step}, {total_steps})")
    if schedule == "constant":
        return base_lr
    return base_lr * (1.0 - step / total_steps)


def new_adam_state():
    return {"t": 0, "m": {}, "v": {}}


def adamw_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, decay=None):
    """One AdamW update of the arrays in ``params`` (name -> ndarray), in place.

    Decoupled weight decay applies to the names flagged in ``decay`` (all
    when None). Arrays without a gradient are left untouched.
    """
    for k, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"adamw_step(): non-finite gradient for {k}", name=k)
    b1, b2 = betas
    state["t"] += 1
    t = state["t"]
    for k, p in params.items():
        g = grads.get(k, None)
        if g is None:
            continue
        if weight_decay and (decay is None or decay.get(k, False)):
            p *= 1.0 - lr * weight_decay
        m = state["m"].get(k, np.zeros(p.shape))
        v = state["v"].get(k, np.zeros(p.shape))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state["m"][k] = m
        state["v"][k] = v
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


def sequence_loss(logits, targets, mask):
    """Mean cross-entropy over the masked positions"""
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=float)
    count = mask.sum()
    if count == 0:
        raise ContractError("sequence_loss(): empty mask")
    V = logits.shape[-1]
    weights = np.eye(V)[targets] * (mask / count)[..., None]
    return -tn.sum_(tn.log_softmax(logits) * Tensor(weights, copy=False))


def masked_accuracy(logits, targets, mask):
    pred = np.argmax(np.asarray(logits), axis=-1)
    mask = np.asarray(mask, dtype=bool)
    return float(np.mean(pred[mask] == np.asarray(targets)[mask]))


def evaluate(adapted, instances, batch_size=32):
    """(loss, accuracy) over ``instances`` without recording a tape"""
    if not instances:
        return None, None
    total_loss = 0.0
    correct = 0.0
    count = 0.0
    for i in range(0, len(instances), batch_size):
        tokens, targets, mask = TaskGenerator.stack(instances[i : i + batch_size])
        logits = adapted.forward(tokens)
        n = float(mask.sum())
        total_loss += sequence_loss(logits, targets, mask).item() * n
        correct += masked_accuracy(logits.data, targets, mask) * n
        count += n
    return total_loss / count, correct / count


def train(adapted, train_set, val_set, config, metrics_path=None):
    """Train the trainable arrays of ``adapted`` with AdamW.

    The parameters of the epoch with the best validation accuracy are
    restored at the end. A non-finite loss restores the last finite state
    and raises :class:`TrainingAborted`.
    """
    if not train_set:
        raise ContractError("train(): empty training set")
    params = adapted.trainable_parameters()
    decay = adapted.decay_flags()
    trainable, total, _ = adapted.parameter_report()
    metrics = RunMetrics(
        adapted.spec.method, adapted.spec.to_dict(), config.lr, config.seed, trainable, total
    )
    bs = config.batch_size
    n_batches = math.ceil(len(train_set) / bs)
    total_steps = config.epochs * n_batches
    state = new_adam_state()
    rng = make_rng(derive_seed(config.seed, "shuffle"))
    stream = open(metrics_path, "w") if metrics_path else None

    t0 = time.perf_counter()
    step = 0
    last_good = adapted.snapshot()
    best = None
    best_acc = -1.0
    best_loss = math.inf
    bad_epochs = 0
    try:
        for epoch in range(config.epochs):
            order = rng.permutation(len(train_set))
            losses = []
            for b in range(n_batches):
                batch = [train_set[i] for i in order[b * bs : (b + 1) * bs]]
                tokens, targets, mask = TaskGenerator.stack(batch)
                lr = lr_at(step, total_steps, config.lr, config.schedule)
                try:
                    if params:
                        with Tape() as tape:
                            loss = sequence_loss(adapted.forward(tokens), targets, mask)
                            tape.backward(loss)
                        grads = {k: tape.grad(v) for k, v in params.items()}
                    else:
                        loss = sequence_loss(adapted.forward(tokens), targets, mask)
                except NumericError as e:
                    adapted.restore(last_good)
                    LOG.error(f"train(): {e} at epoch={epoch} step={step}, aborting")
                    raise TrainingAborted(str(e), snapshot=last_good, epoch=epoch)
                value = loss.item()
                if not math.isfinite(value):
                    adapted.restore(last_good)
                    LOG.error(f"train(): loss={value} at epoch={epoch} step={step}, aborting")
                    raise TrainingAborted(f"train(): non-finite loss at step {step}", snapshot=last_good, epoch=epoch)
                if params:
                    try:
                        adamw_step(
                            {k: v.data for k, v in params.items()},
                            grads,
                            state,
                            lr,
                            config.betas,
                            config.eps,
                            config.weight_decay,
                            decay,
                        )
                    except NumericError as e:
                        adapted.restore(last_good)
                        LOG.error(f"train(): {e}, aborting")
                        raise TrainingAborted(str(e), snapshot=last_good, epoch=epoch)
                losses.append(value)
                step += 1

            try:
                val_loss, val_acc = evaluate(adapted, val_set, bs)
            except NumericError as e:
                adapted.restore(last_good)
                LOG.error(f"train(): {e} during validation at epoch={epoch}, aborting")
                raise TrainingAborted(str(e), snapshot=last_good, epoch=epoch)
            last_good = adapted.snapshot()
            metrics.train_loss.append(float(np.mean(losses)))
            if val_loss is not None:
                metrics.val_loss.append(val_loss)
                metrics.val_accuracy.append(val_acc)
                if val_acc > best_acc:
                    best_acc = val_acc
                    best = (epoch, last_good)
                if val_loss < best_loss:
                    best_loss = val_loss
                    bad_epochs = 0
                else:
                    bad_epochs += 1
            else:
                best = (epoch, last_good)

            LOG.info(
                f"epoch={epoch} train_loss={metrics.train_loss[-1]:.4f} val_loss={val_loss} val_acc={val_acc}"
            )
            if stream:
                rec = {
                    "epoch": epoch,
                    "train_loss": metrics.train_loss[-1],
                    "val_loss": val_loss,
                    "val_accuracy": val_acc,
                }
                stream.write(json.dumps(rec, sort_keys=True) + "\n")
                stream.flush()
            if config.early_stopping and val_loss is not None and bad_epochs >= config.patience:
                metrics.stopped_early = True
                LOG.info(f"train(): early stop after epoch={epoch}")
                break
    finally:
        if stream:
            stream.close()

    metrics.best_epoch = best[0]
    adapted.restore(best[1])
    metrics.wall_time = time.perf_counter() - t0
    LOG.info(f"train(): {adapted.spec.key} best_epoch={metrics.best_epoch} wall_time={metrics.wall_time:.1f}s")
    return metrics


def grid_search(model_factory, train_set, config, grid=None, probe_size=None, train_fn=None):
    """Pick the learning rate with the lowest training loss after one epoch
    on the first ``probe_size`` instances. Diverged candidates are skipped.

    Returns (lr, table of candidates).
    """
    grid = config.lr_grid if grid is None else grid
    probe_size = config.probe_size if probe_size is None else probe_size
    train_fn = train if train_fn is None else train_fn
    if not grid:
        raise ContractError("grid_search(): empty learning rate grid")
    probe = train_set[:probe_size]
    rows = []
    for lr in grid:
        cfg = config.replace(lr=lr, epochs=1, early_stopping=False)
        try:
            loss = train_fn(model_factory(), probe, [], cfg).train_loss[-1]
        except NumericError as e:
            LOG.debug(f"grid_search(): lr={lr} failed: {e}")
            loss = math.nan
        if not math.isfinite(loss):
            LOG.warning(f"grid_search(): lr={lr} diverged")
        rows.append({"lr": lr, "probe_loss": loss})
    df = pd.DataFrame(rows)
    finite = df[np.isfinite(df["probe_loss"])]
    if finite.empty:
        raise NumericError(f"grid_search(): every learning rate diverged {list(grid)}")
    lr = float(finite.loc[finite["probe_loss"].idxmin(), "lr"])
    LOG.info(f"grid_search(): selected lr={lr}")
    return lr, df


def pretrain_backbone(model, train_set, val_set, config):
    """Full fine-tuning of every backbone array; returns the trained model"""
    adapted = adapters.apply_adapter(model, adapters.AdapterSpec("full_all"), seed=config.seed)
    train(adapted, train_set, val_set, config)
    return MambaModel.from_arrays(model.arch, adapted.model.to_arrays())


def run_experiment(exp):
    """Pretrain (or load) a backbone, attach the adapter and train it.

    Writes metrics.jsonl, metrics.json and adapter.ckpt to the experiment's
    output directory and returns the :class:`RunMetrics`.
    """
    out = exp.output_dir
    os.makedirs(out, exist_ok=True)
    seed = exp.seed

    model = MambaModel.build(exp.arch, seed=derive_seed(seed, "backbone"))
    if exp.backbone_checkpoint:
        ckpt = load_checkpoint(exp.backbone_checkpoint)
        model = MambaModel.from_arrays(exp.arch, ckpt.arrays)
        LOG.info(f"backbone loaded from {exp.backbone_checkpoint}")

    if exp.pretrain_task is not None:
        gen_a, gen_b = domain_shift(exp.pretrain_task, exp.task)
    else:
        gen_a, gen_b = None, TaskGenerator(exp.task)

    if gen_a is not None and not exp.backbone_checkpoint:
        pcfg = exp.pretrain
        model = pretrain_backbone(
            model,
            gen_a.dataset(pcfg.n_train, derive_seed(seed, "pretrain_train")),
            gen_a.dataset(pcfg.n_val, derive_seed(seed, "pretrain_val")),
            pcfg,
        )
        path = os.path.join(out, "backbone.ckpt")
        save_checkpoint(path, model.to_arrays(), {"arch": model.arch.to_dict(), "kind": "backbone"})

    cfg = exp.train
    train_set = gen_b.dataset(cfg.n_train, derive_seed(seed, "train"))
    val_set = gen_b.dataset(cfg.n_val, derive_seed(seed, "val"))

    masks = None
    if exp.adapter.method == "sdt":
        bs = cfg.batch_size
        warmup = [
            TaskGenerator.stack(train_set[i * bs : (i + 1) * bs])
            for i in range(min(cfg.sdt_warmup_batches, math.ceil(len(train_set) / bs)))
        ]
        masks = adapters.select_sdt_mask(
            model, warmup, exp.adapter.sdt_keep_fraction, lambda logits, b: sequence_loss(logits, b[1], b[2])
        )

    def _factory():
        return adapters.apply_adapter(model, exp.adapter, seed=cfg.seed, masks=masks)

    if exp.grid_search:
        lr, table = grid_search(_factory, train_set, cfg)
        table.to_csv(os.path.join(out, "grid.csv"), index=False)
        cfg = cfg.replace(lr=lr)

    adapted = _factory()
    metrics = train(adapted, train_set, val_set, cfg, metrics_path=os.path.join(out, "metrics.jsonl"))
    metrics.save(os.path.join(out, "metrics.json"))
    save_checkpoint(
        os.path.join(out, "adapter.ckpt"),
        adapted.to_arrays(),
        {"arch": model.arch.to_dict(), "adapter": exp.adapter.to_dict(), "kind": "adapted"},
    )
    return metrics


def load_adapted(path, arch=None):
    """Rebuild an :class:`AdaptedModel` from a checkpoint written by
    :func:`run_experiment`"""
    from .archs import ArchConfig

    ckpt = load_checkpoint(path)
    meta = ckpt.metadata
    if arch is None:
        conf = copy.deepcopy(meta["arch"])
        arch = ArchConfig.make_from_conf(conf.pop("name"), conf)
    spec = adapters.AdapterSpec.from_dict(meta["adapter"])
    return adapters.AdaptedModel.from_arrays(arch, spec, ckpt.arrays)
