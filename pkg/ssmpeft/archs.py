# (C) Copyright 2024- ssmpeft developers.
#
# This software is licensed under the terms of the Apache Licence Version 2.0
# which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
#

import json
import logging
import math
import os
from collections import OrderedDict

import yaml

from .errors import ConfigError, ContractError, UnknownArchError

LOG = logging.getLogger(__name__)

ETC_PATH = os.path.join(os.path.dirname(__file__), "etc")

# arrays of one block, in enumeration order
BLOCK_ARRAYS = [
    "norm_weight",
    "W_in",
    "conv_kernel",
    "conv_bias",
    "W_dt_in",
    "W_B",
    "W_C",
    "W_dt",
    "b_dt",
    "A_log",
    "skip_D",
    "W_out",
]

# the SSM module as counted by the parameter tables: conv1d, the x and dt
# projections, A and D
S6_ARRAYS = [
    "conv_kernel",
    "conv_bias",
    "W_dt_in",
    "W_B",
    "W_C",
    "W_dt",
    "b_dt",
    "A_log",
    "skip_D",
]

BIAS_ARRAYS = ["conv_bias", "b_dt"]


class ArchConfig:
    def __init__(
        self,
        name="custom",
        d_model=768,
        n_layer=24,
        d_state=16,
        expand=2,
        dt_rank="auto",
        vocab=50280,
        conv_width=4,
        conv_bias=True,
        tie_embeddings=True,
        nominal_params=None,
    ):
        self.name = name
        self.d_model = d_model
        self.n_layer = n_layer
        self.d_state = d_state
        self.expand = expand
        self.dt_rank = math.ceil(d_model / 16) if dt_rank == "auto" else dt_rank
        self.vocab = vocab
        self.conv_width = conv_width
        self.conv_bias = conv_bias
        self.tie_embeddings = tie_embeddings
        self.nominal_params = nominal_params
        for k in ["d_model", "n_layer", "d_state", "expand", "dt_rank", "vocab"]:
            v = getattr(self, k)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ContractError(f"ArchConfig({name}): {k} must be a positive int (got {v!r})")
        if not isinstance(conv_width, int) or conv_width < 1:
            raise ContractError(f"ArchConfig({name}): conv_width must be >= 1 (got {conv_width!r})")

    @property
    def d_inner(self):
        return self.expand * self.d_model

    @staticmethod
    def make_from_conf(name, conf):
        try:
            return ArchConfig(name=name, **conf)
        except TypeError as e:
            raise ConfigError(f"invalid arch definition: {e}", path=name)

    def to_dict(self):
        return {
            "name": self.name,
            "d_model": self.d_model,
            "n_layer": self.n_layer,
            "d_state": self.d_state,
            "expand": self.expand,
            "dt_rank": self.dt_rank,
            "vocab": self.vocab,
            "conv_width": self.conv_width,
            "conv_bias": self.conv_bias,
            "tie_embeddings": self.tie_embeddings,
        }

    def __eq__(self, other):
        return isinstance(other, ArchConfig) and self.to_dict() == other.to_dict()

    def __repr__(self):
        return f"ArchConfig(name={self.name}, d_model={self.d_model}, n_layer={self.n_layer})"

    def block_array_shapes(self):
        d, e, h, r = self.d_model, self.d_inner, self.d_state, self.dt_rank
        shapes = OrderedDict(
            [
                ("norm_weight", (d,)),
                ("W_in", (2 * e, d)),
                ("conv_kernel", (e, self.conv_width)),
                ("conv_bias", (e,)),
                ("W_dt_in", (r, e)),
                ("W_B", (h, e)),
                ("W_C", (h, e)),
                ("W_dt", (e, r)),
                ("b_dt", (e,)),
                ("A_log", (e, h)),
                ("skip_D", (e,)),
                ("W_out", (d, e)),
            ]
        )
        if not self.conv_bias:
            del shapes["conv_bias"]
        return shapes

    def model_array_shapes(self):
        """Shapes of every backbone array keyed by its enumeration name"""
        r = OrderedDict([("embedding", (self.vocab, self.d_model))])
        block = self.block_array_shapes()
        for i in range(self.n_layer):
            for k, v in block.items():
                r[f"layers.{i}.{k}"] = v
        r["norm_f"] = (self.d_model,)
        if not self.tie_embeddings:
            r["head"] = (self.d_model, self.vocab)
        return r

    def param_count(self):
        return sum(math.prod(s) for s in self.model_array_shapes().values())


class ArchRegistry:
    archs = OrderedDict()
    loaded = False

    @staticmethod
    def get(name):
        ArchRegistry._load()
        if name not in ArchRegistry.archs:
            raise UnknownArchError(
                f"unknown arch={name}, available: {', '.join(ArchRegistry.archs)}"
            )
        return ArchRegistry.archs[name]

    @staticmethod
    def names():
        ArchRegistry._load()
        return list(ArchRegistry.archs.keys())

    @staticmethod
    def _load():
        if ArchRegistry.loaded:
            return
        file_name = os.path.join(ETC_PATH, "archs.yaml")
        with open(file_name) as f:
            data = yaml.load(f, Loader=yaml.SafeLoader)
        for name, conf in data.items():
            ArchRegistry.archs[name] = ArchConfig.make_from_conf(name, conf)
        ArchRegistry.loaded = True

    @staticmethod
    def load_file(path):
        """Merge the ArchConfig records of a JSON file over the registry"""
        ArchRegistry._load()
        try:
            with open(path) as f:
                data = json.load(f)
        except (OSError, ValueError) as e:
            raise ConfigError(f"cannot read arch file: {e}", path=str(path))
        if isinstance(data, dict):
            data = [dict(v, name=k) for k, v in data.items()]
        if not isinstance(data, list):
            raise ConfigError("arch file must hold a list or mapping of records", path=str(path))
        for i, item in enumerate(data):
            if not isinstance(item, dict) or "name" not in item:
                raise ConfigError("arch record without a name", path=f"[{i}]")
            conf = dict(item)
            name = conf.pop("name")
            ArchRegistry.archs[name] = ArchConfig.make_from_conf(name, conf)
            LOG.info(f"arch={name} loaded from {path}")


def builtin_configs():
    return OrderedDict((k, ArchRegistry.get(k)) for k in ArchRegistry.names())


def get_arch(name):
    if isinstance(name, ArchConfig):
        return name
    return ArchRegistry.get(name)
