# (C) Copyright 2024- ssmpeft developers.
#
# This software is licensed under the terms of the Apache Licence Version 2.0
# which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
#

import json
import logging
import os

import jsonschema
import yaml

from .adapters import AdapterSpec
from .archs import ArchConfig, get_arch
from .core.utils import seed_from_env
from .errors import ConfigError, ContractError, UnknownArchError
from .tasks import TaskSpec
from .trainer import TrainConfig

LOG = logging.getLogger(__name__)

SCHEMA_PATH = os.path.join(os.path.dirname(__file__), "etc", "schema")

_SCHEMAS = {}


def get_schema(name):
    if name not in _SCHEMAS:
        with open(os.path.join(SCHEMA_PATH, f"{name}.schema.json")) as f:
            _SCHEMAS[name] = json.load(f)
    return _SCHEMAS[name]


def validate(data, schema_name):
    """Raise ConfigError naming the dotted path of the first violation"""
    validator = jsonschema.Draft7Validator(get_schema(schema_name))
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        path = ".".join(str(x) for x in e.absolute_path)
        raise ConfigError(e.message, path=path or "<root>")


class ExperimentConfig:
    def __init__(
        self,
        arch,
        adapter,
        task,
        name="experiment",
        seed=0,
        pretrain_task=None,
        pretrain=None,
        train=None,
        grid_search=False,
        output_dir="out",
        backbone_checkpoint=None,
    ):
        self.name = name
        self.seed = seed
        self.arch = arch
        self.adapter = adapter
        self.task = task
        self.pretrain_task = pretrain_task
        self.train = TrainConfig() if train is None else train
        self.pretrain = self.train if pretrain is None else pretrain
        self.grid_search = grid_search
        self.output_dir = output_dir
        self.backbone_checkpoint = backbone_checkpoint

    @staticmethod
    def from_dict(data, overrides=None):
        """Validate ``data`` and build the config.

        Precedence of the seed and the training settings: file, then the
        SSMPEFT_SEED environment variable, then ``overrides``.
        """
        validate(data, "experiment")
        data = dict(data)
        overrides = {} if overrides is None else {k: v for k, v in overrides.items() if v is not None}

        seed = data.get("seed", 0)
        try:
            env_seed = seed_from_env()
        except ValueError as e:
            raise ConfigError(str(e), path="SSMPEFT_SEED")
        if env_seed is not None:
            seed = env_seed
        seed = overrides.pop("seed", seed)

        arch = data["arch"]
        try:
            if isinstance(arch, str):
                arch = get_arch(arch)
            else:
                conf = dict(arch)
                arch = ArchConfig.make_from_conf(conf.pop("name", "custom"), conf)
        except (UnknownArchError, ContractError) as e:
            raise ConfigError(str(e), path="arch")

        try:
            if "method" in overrides:
                adapter = AdapterSpec.with_defaults(overrides.pop("method"))
            else:
                adapter = AdapterSpec.from_dict(data["adapter"])
        except ContractError as e:
            raise ConfigError(str(e), path="adapter")

        tasks = {}
        for key in ["task", "pretrain_task"]:
            if key in data:
                try:
                    tasks[key] = TaskSpec.from_dict(data[key])
                except (ContractError, TypeError) as e:
                    raise ConfigError(str(e), path=key)
                if tasks[key].vocab > arch.vocab:
                    raise ConfigError(
                        f"task vocab {tasks[key].vocab} exceeds arch vocab {arch.vocab}", path=f"{key}.vocab"
                    )

        train_conf = dict(data.get("train", {}))
        train_conf["seed"] = seed
        for k in ["lr", "epochs"]:
            if k in overrides:
                train_conf[k] = overrides.pop(k)
        trains = {}
        for key, conf in [("train", train_conf), ("pretrain", data.get("pretrain", None))]:
            if conf is None:
                continue
            try:
                trains[key] = TrainConfig.from_dict(conf)
            except ContractError as e:
                raise ConfigError(str(e), path=key)

        r = ExperimentConfig(
            arch,
            adapter,
            tasks["task"],
            name=data.get("name", "experiment"),
            seed=seed,
            pretrain_task=tasks.get("pretrain_task", None),
            pretrain=trains.get("pretrain", None),
            train=trains["train"],
            grid_search=data.get("grid_search", False),
            output_dir=overrides.pop("output_dir", data.get("output_dir", "out")),
            backbone_checkpoint=data.get("backbone_checkpoint", None),
        )
        if overrides:
            raise ConfigError(f"unknown overrides {sorted(overrides)}", path="<flags>")
        return r


def read_config_file(path):
    try:
        with open(path) as f:
            if str(path).endswith((".yaml", ".yml")):
                return yaml.safe_load(f)
            return json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}", path=str(path))
    except (ValueError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot parse config: {e}", path=str(path))


def load_experiment(path, overrides=None):
    r = ExperimentConfig.from_dict(read_config_file(path), overrides)
    LOG.info(f"experiment={r.name} loaded from {path}")
    return r
