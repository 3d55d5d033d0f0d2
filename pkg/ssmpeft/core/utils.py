#
# (C) Copyright 2024- ssmpeft developers.
#
# This software is licensed under the terms of the Apache Licence Version 2.0
# which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
#

import glob
import logging
import os
import re
import zlib

import numpy as np

LOG = logging.getLogger(__name__)

SEED_ENV_VAR = "SSMPEFT_SEED"


def make_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def derive_seed(seed, *keys):
    """Combine ``seed`` with string/int keys into a new 32 bit seed.

    The result depends only on the arguments, so per-item streams (one per
    layer, method or instance) are reproducible in any call order.
    """
    text = ":".join([str(seed)] + [str(k) for k in keys])
    return zlib.crc32(text.encode("utf-8"))


def seed_from_env(default=None):
    v = os.environ.get(SEED_ENV_VAR, "")
    if v == "":
        return default
    try:
        return int(v)
    except ValueError:
        raise ValueError(f"{SEED_ENV_VAR} must be an integer (got {v!r})")


def get_file_list(path, file_name_pattern=None):
    m = None
    if isinstance(file_name_pattern, str):
        if file_name_pattern.startswith('re"'):
            m = re.compile(file_name_pattern[3:-1]).match

    if m is not None:
        return sorted(os.path.join(path, f) for f in filter(m, os.listdir(path=path)))
    else:
        if isinstance(file_name_pattern, str) and file_name_pattern != "":
            path = os.path.join(path, file_name_pattern)
        if not has_globbing(path):
            return [path]
        else:
            return sorted(glob.glob(path))


def has_globbing(text):
    for x in ["*", "?"]:
        if x in text:
            return True
    if "[" in text and "]" in text:
        return True
    else:
        return False


def expand_paths(items, file_name_pattern="*.json"):
    """Expand files, directories and glob patterns into a sorted file list"""
    r = []
    for item in items:
        if os.path.isdir(item):
            r.extend(get_file_list(item, file_name_pattern))
        else:
            r.extend(get_file_list(item))
    return [f for f in r if os.path.isfile(f)]
